//! The cosine embedding loss and the five terms of the training objective.
//!
//! Every term except the regularizer is built on
//!
//! ```text
//! L_emb(f1, f2, same)      = 1 - cos(f1, f2)
//! L_emb(f1, f2, different) = max(margin, cos(f1, f2))
//! ```
//!
//! so each lies in `[0, 2]` and is invariant to positive rescaling of either
//! feature. The batch terms are means over aligned pairs.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, IvfgError, Result};
use crate::types::{dot, norm, FeatureVector, LatentVector};

/// The identity indicator `l` of the embedding loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// `l = 1`: pull the features together.
    Same,
    /// `l = -1`: push the cosine down to the margin.
    Different,
}

impl Target {
    pub fn from_indicator(l: i8) -> Result<Self> {
        match l {
            1 => Ok(Target::Same),
            -1 => Ok(Target::Different),
            other => Err(IvfgError::InvalidConfig(format!("identity indicator must be 1 or -1, got {other}"))),
        }
    }
}

/// Per-term weights of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pri: f64,
    pub con: f64,
    pub intra: f64,
    pub inter: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pri: 0.1,
            con: 1.0,
            intra: 1.0,
            inter: 1.0,
            reg: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.4,
            weights: LossWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if [w.pri, w.con, w.intra, w.inter, w.reg].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(IvfgError::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(IvfgError::InvalidConfig(format!("margin {} outside [-1, 1]", self.margin)));
        }
        Ok(())
    }
}

/// Embedding loss with gradients w.r.t. both inputs.
pub(crate) fn embedding_loss_grad(a: &[f64], b: &[f64], target: Target, margin: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    ensure_dim("embedding loss", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(IvfgError::ZeroVector("embedding loss"));
    }
    let cos = dot(a, b) / (na * nb);
    // d cos / d a = b / (|a||b|) - cos · a / |a|², symmetric for b.
    let dcos = |x: &[f64], y: &[f64], nx: f64, ny: f64| -> Vec<f64> {
        x.iter().zip(y).map(|(xi, yi)| yi / (nx * ny) - cos * xi / (nx * nx)).collect()
    };
    let (loss, sign) = match target {
        Target::Same => (1.0 - cos, -1.0),
        Target::Different if cos > margin => (cos, 1.0),
        Target::Different => (margin, 0.0),
    };
    if sign == 0.0 {
        return Ok((loss, vec![0.0; a.len()], vec![0.0; b.len()]));
    }
    let ga = dcos(a, b, na, nb).into_iter().map(|g| sign * g).collect();
    let gb = dcos(b, a, nb, na).into_iter().map(|g| sign * g).collect();
    Ok((loss, ga, gb))
}

/// `L_emb(f1, f2, l)` with margin `m`.
pub fn cosine_embedding_loss(f1: &FeatureVector, f2: &FeatureVector, target: Target, margin: f64) -> Result<f64> {
    ensure_dim("embedding loss", f1.dim(), f2.dim())?;
    let cos = crate::types::cosine_similarity(f1.as_slice(), f2.as_slice())?;
    Ok(match target {
        Target::Same => 1.0 - cos,
        Target::Different => margin.max(cos),
    })
}

fn batch_mean(a: &[FeatureVector], b: &[FeatureVector], target: Target, margin: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(IvfgError::BatchMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(IvfgError::EmptyInput("loss batch"));
    }
    let sum = a
        .iter()
        .zip(b)
        .map(|(x, y)| cosine_embedding_loss(x, y, target, margin))
        .sum::<Result<f64>>()?;
    Ok(sum / a.len() as f64)
}

/// Privacy term: virtual features `R(T(x1, k1))` against originals `R(x1)`, `l = -1`.
pub fn privacy_loss(virtual_feats: &[FeatureVector], original_feats: &[FeatureVector], cfg: &LossConfig) -> Result<f64> {
    batch_mean(virtual_feats, original_feats, Target::Different, cfg.margin)
}

/// Conditional term: `R(T(x1, k1))` against `R(T(x1, k2))`, `l = -1`.
pub fn conditional_loss(feats_k1: &[FeatureVector], feats_k2: &[FeatureVector], cfg: &LossConfig) -> Result<f64> {
    batch_mean(feats_k1, feats_k2, Target::Different, cfg.margin)
}

/// Intra-group term: `R(T(x1, k1))` against `R(T(x2, k1))`, `l = 1`.
pub fn intra_loss(feats_x1k1: &[FeatureVector], feats_x2k1: &[FeatureVector], cfg: &LossConfig) -> Result<f64> {
    batch_mean(feats_x1k1, feats_x2k1, Target::Same, cfg.margin)
}

/// Inter-group term: `R(T(x1, k1))` against `R(T(y, k1))`, `l = -1`.
pub fn inter_loss(feats_x1k1: &[FeatureVector], feats_yk1: &[FeatureVector], cfg: &LossConfig) -> Result<f64> {
    batch_mean(feats_x1k1, feats_yk1, Target::Different, cfg.margin)
}

/// `||z - z̄||²`.
pub fn reg_loss(z: &LatentVector, z_bar: &LatentVector) -> Result<f64> {
    ensure_dim("regularizer", z_bar.dim(), z.dim())?;
    Ok(z.as_slice().iter().zip(z_bar.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Unweighted values of the five terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pri: f64,
    pub con: f64,
    pub intra: f64,
    pub inter: f64,
    pub reg: f64,
}

/// The five terms plus their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pri: f64,
    pub con: f64,
    pub intra: f64,
    pub inter: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            pri: self.pri,
            con: self.con,
            intra: self.intra,
            inter: self.inter,
            reg: self.reg,
        }
    }
}

/// Weighted sum of the five terms. A zero weight drops its term entirely,
/// even if that term is not finite.
pub fn full_objective(c: LossComponents, cfg: &LossConfig) -> LossBreakdown {
    let w = cfg.weights;
    let term = |weight: f64, value: f64| if weight == 0.0 { 0.0 } else { weight * value };
    let total = term(w.pri, c.pri) + term(w.con, c.con) + term(w.intra, c.intra) + term(w.inter, c.inter) + term(w.reg, c.reg);
    LossBreakdown {
        pri: c.pri,
        con: c.con,
        intra: c.intra,
        inter: c.inter,
        reg: c.reg,
        total,
    }
}
