//! A minimal 2-D scatter plot written straight to PNG.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};

/// Label suffix marking a virtual image's features.
pub const VIRTUAL_SUFFIX: &str = "+virtual";

const SIZE: u32 = 512;
const MARGIN: f64 = 24.0;

fn hue_to_rgb(h: f64) -> Rgb<u8> {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        let v = 1.0 - (k.min(4.0 - k).clamp(0.0, 1.0));
        (40.0 + 180.0 * v) as u8
    };
    Rgb([f(5.0), f(3.0), f(1.0)])
}

/// Draws one marker per point, coloured by identity. Originals are filled
/// squares; points whose label ends in [`VIRTUAL_SUFFIX`] are hollow squares
/// in the same identity's colour.
pub fn scatter(path: &Path, points: &[[f64; 2]], labels: &[&str]) -> Result<()> {
    if points.len() != labels.len() {
        bail!("{} points but {} labels", points.len(), labels.len());
    }
    if points.is_empty() {
        bail!("nothing to plot");
    }
    let mut colours = BTreeMap::new();
    for l in labels {
        let id = l.strip_suffix(VIRTUAL_SUFFIX).unwrap_or(l);
        let n = colours.len();
        colours.entry(id).or_insert_with(|| hue_to_rgb((n as f64 * 0.618_033_988_75).fract()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = SIZE as f64 - 2.0 * MARGIN;
    let to_px = |v: f64, a: usize| {
        let range = (hi[a] - lo[a]).max(1e-12);
        MARGIN + (v - lo[a]) / range * span
    };

    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    for (p, l) in points.iter().zip(labels) {
        let (id, hollow) = match l.strip_suffix(VIRTUAL_SUFFIX) {
            Some(id) => (id, true),
            None => (*l, false),
        };
        let colour = colours[id];
        let cx = to_px(p[0], 0).round() as i64;
        let cy = (SIZE as f64 - to_px(p[1], 1)).round() as i64;
        let r: i64 = if hollow { 4 } else { 3 };
        for dy in -r..=r {
            for dx in -r..=r {
                if hollow && dx.abs() != r && dy.abs() != r {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_markers_in_identity_colours() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let points = [[0.0, 0.0], [1.0, 1.0], [0.5, 0.2]];
        scatter(&path, &points, &["a", "a+virtual", "b"]).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (SIZE, SIZE));
        let corner = img.get_pixel(MARGIN as u32, SIZE - MARGIN as u32);
        assert_ne!(*corner, Rgb([255, 255, 255]));
        let virt_centre = img.get_pixel(SIZE - MARGIN as u32, MARGIN as u32);
        assert_eq!(*virt_centre, Rgb([255, 255, 255]));
        assert!(scatter(&path, &points, &["a"]).is_err());
        assert!(scatter(&path, &[], &[]).is_err());
    }
}
