//! Value types shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::error::{IvfgError, Result};

/// A square image stored channel-major (`C×H×W`) with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageArray {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageArray {
    /// Builds an image from channel-major values, checking shape and range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || height != width {
            return Err(IvfgError::InvalidImage(format!(
                "images must be square and non-empty, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(IvfgError::InvalidImage(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(IvfgError::DimensionMismatch {
                context: "image data",
                expected: height * width * channels,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(IvfgError::InvalidImage(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from values that are already known to satisfy the invariants.
    pub(crate) fn from_raw(size: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), size * size * channels);
        Self {
            height: size,
            width: size,
            channels,
            data,
        }
    }

    pub fn zeros(size: usize, channels: usize) -> Self {
        Self::from_raw(size, channels, vec![0.0; size * size * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Side length; images are always square.
    pub fn size(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// The image turned upside down (rotated by 180 degrees).
    pub fn rotated_180(&self) -> Self {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            data.extend(self.data[c * plane..(c + 1) * plane].iter().rev());
        }
        Self { data, ..*self }
    }

    /// Snaps every value onto the 8-bit grid used by the on-disk format.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| f64::from(to_u8(v)) / 127.5 - 1.0)
            .collect();
        Self { data, ..*self }
    }

    /// Mean absolute difference against another image of the same shape.
    pub fn mean_abs_diff(&self, other: &ImageArray) -> f64 {
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        sum / self.data.len() as f64
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An embedding produced by the encoder or the recognizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// A point in the generator's latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two equally sized, nonzero vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    crate::error::ensure_dim("cosine similarity", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(IvfgError::ZeroVector("cosine similarity"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_non_square() {
        assert!(ImageArray::new(2, 2, 1, vec![0.0, 1.5, 0.0, 0.0]).is_err());
        assert!(ImageArray::new(2, 3, 1, vec![0.0; 6]).is_err());
        assert!(ImageArray::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageArray::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn rotation_twice_is_identity() {
        let img = ImageArray::new(2, 2, 1, vec![-1.0, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(img.rotated_180().data(), &[1.0, 0.5, 0.0, -1.0]);
        assert_eq!(img.rotated_180().rotated_180(), img);
    }

    #[test]
    fn quantization_is_idempotent() {
        let img = ImageArray::new(1, 1, 3, vec![-1.0, 0.1234, 1.0]).unwrap();
        let q = img.quantized();
        assert_eq!(q.quantized(), q);
        assert_eq!(q.data()[0], -1.0);
        assert_eq!(q.data()[2], 1.0);
    }

    #[test]
    fn cosine_of_zero_vector_is_an_error() {
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }
}
