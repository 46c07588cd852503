//! Labeled feature files and a 2-D PCA projection for visualization.
//!
//! File layout: a header `dim<TAB>count`, then one row per vector,
//! `label<TAB>f1<TAB>…<TAB>f_dim`. Floats use Rust's shortest round-trip
//! formatting, so reading a written file gives back the exact values.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure_dim, IvfgError, Result};
use crate::types::FeatureVector;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeature {
    pub label: String,
    pub feature: FeatureVector,
}

pub fn write_features(path: &Path, rows: &[LabeledFeature]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.feature.dim());
    let mut out = format!("{dim}\t{}\n", rows.len());
    for r in rows {
        ensure_dim("feature row", dim, r.feature.dim())?;
        if r.label.contains(['\t', '\n']) {
            return Err(IvfgError::InvalidConfig(format!("label {:?} contains a tab or newline", r.label)));
        }
        out.push_str(&r.label);
        for v in r.feature.as_slice() {
            write!(out, "\t{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| IvfgError::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| IvfgError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<LabeledFeature>> {
    let text = std::fs::read_to_string(path).map_err(|e| IvfgError::io(path, e))?;
    let bad = |msg: String| IvfgError::InvalidConfig(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
    let (dim, count) = header
        .split_once('\t')
        .and_then(|(d, c)| Some((d.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let mut rows = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let mut fields = line.split('\t');
        let label = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("row {i}: bad float {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(bad(format!("row {i}: expected {dim} values, got {}", values.len())));
        }
        rows.push(LabeledFeature {
            label,
            feature: FeatureVector(values),
        });
    }
    if rows.len() != count {
        return Err(bad(format!("header promises {count} rows, found {}", rows.len())));
    }
    Ok(rows)
}

/// Projects features onto their two leading principal components. Each
/// component's sign is fixed so its largest-magnitude entry is positive.
pub fn pca_2d(features: &[FeatureVector]) -> Result<Vec<[f64; 2]>> {
    let first = features.first().ok_or(IvfgError::EmptyInput("pca features"))?;
    let dim = first.dim();
    if dim < 2 {
        return Err(IvfgError::Degenerate("pca needs at least 2 feature dimensions".into()));
    }
    for f in features {
        ensure_dim("pca feature", dim, f.dim())?;
    }
    let n = features.len();
    let mut x = DMatrix::from_fn(n, dim, |r, c| features[r].0[c]);
    for c in 0..dim {
        let mean = x.column(c).mean();
        x.column_mut(c).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|e| e * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|r| {
            let row = x.row(r);
            let p = |axis: &[f64]| row.iter().zip(axis).map(|(a, b)| a * b).sum();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}
