//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure_dim, IvfgError, Result};
use crate::types::FeatureVector;

const EIGEN_FLOOR: f64 = 1e-10;

/// Mean and unbiased covariance. The mean is accumulated as offsets from the
/// first sample, so a set of identical vectors has exactly that mean and a
/// zero covariance.
fn moments(features: &[FeatureVector], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(IvfgError::Degenerate(format!(
            "covariance needs at least 2 samples, got {}",
            features.len()
        )));
    }
    for f in features {
        ensure_dim("fid feature", dim, f.dim())?;
    }
    let n = features.len() as f64;
    let x0 = DVector::from_column_slice(features[0].as_slice());
    let mut offset = DVector::zeros(dim);
    for f in features {
        offset += DVector::from_column_slice(f.as_slice()) - &x0;
    }
    let mean = &x0 + offset / n;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in features {
        let d = DVector::from_column_slice(f.as_slice()) - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    Ok((mean, cov / (n - 1.0)))
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let roots = e.eigenvalues.map(|v| if v < EIGEN_FLOOR { 0.0 } else { v.sqrt() });
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// `||μa − μb||² + tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// The trace of `(Σa Σb)^½` is taken as the trace of the square root of the
/// symmetric matrix `Σa^½ Σb Σa^½`, which has the same eigenvalues.
pub fn fid(features_a: &[FeatureVector], features_b: &[FeatureVector]) -> Result<f64> {
    let dim = features_a
        .first()
        .or(features_b.first())
        .ok_or(IvfgError::EmptyInput("fid features"))?
        .dim();
    let (mu_a, cov_a) = moments(features_a, dim)?;
    let (mu_b, cov_b) = moments(features_b, dim)?;
    let root_a = sqrt_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&v| if v < EIGEN_FLOOR { 0.0 } else { v.sqrt() })
        .sum();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(rows: &[&[f64]]) -> Vec<FeatureVector> {
        rows.iter().map(|r| FeatureVector(r.to_vec())).collect()
    }

    #[test]
    fn identical_sets_are_at_distance_zero() {
        let a = fv(&[&[1.0, 2.0, 0.5], &[-1.0, 0.3, 2.0], &[0.2, -0.7, 1.1], &[0.9, 0.1, -0.4]]);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn point_masses_give_squared_mean_distance() {
        let a = fv(&[&[0.1, 0.7], &[0.1, 0.7], &[0.1, 0.7]]);
        let b = fv(&[&[1.3, -0.2], &[1.3, -0.2]]);
        let expected = (0.1f64 - 1.3).powi(2) + (0.7f64 + 0.2).powi(2);
        assert_eq!(fid(&a, &b).unwrap(), expected);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // Samples with mean 0, variance 1 against mean 3, variance 4:
        // (0 − 3)² + 1 + 4 − 2·√4 = 10.
        let a = fv(&[&[-1.0], &[1.0], &[-1.0], &[1.0], &[0.0]]);
        let sd = (4.0f64 * 4.0 / 5.0).sqrt();
        let b: Vec<FeatureVector> = [-1.0, 1.0, -1.0, 1.0, 0.0].iter().map(|v| FeatureVector(vec![3.0 + sd * v])).collect();
        let var_a = 4.0 / 4.0;
        let var_b = sd * sd * 4.0 / 4.0;
        let expected = 9.0 + var_a + var_b - 2.0 * (var_a * var_b).sqrt();
        assert!((fid(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let a = fv(&[&[1.0, 2.0]]);
        let b = fv(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(fid(&a, &b), Err(IvfgError::Degenerate(_))));
        assert!(fid(&[], &[]).is_err());
        assert!(fid(&b, &fv(&[&[1.0], &[2.0]])).is_err());
    }
}
