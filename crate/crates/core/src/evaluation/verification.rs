//! Genuine/impostor score sets, equal error rate and area under the ROC curve.

use serde::{Deserialize, Serialize};

use crate::error::{IvfgError, Result};

/// Match scores of same-identity (genuine) and cross-identity (impostor) pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        let s = Self { genuine, impostor };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(IvfgError::EmptyInput("genuine scores"));
        }
        if self.impostor.is_empty() {
            return Err(IvfgError::EmptyInput("impostor scores"));
        }
        if self.genuine.iter().chain(&self.impostor).any(|s| !s.is_finite()) {
            return Err(IvfgError::InvalidConfig("match scores must be finite".into()));
        }
        Ok(())
    }

    /// False-accept rate: share of impostor scores `>= t`.
    pub fn far(&self, t: f64) -> f64 {
        self.impostor.iter().filter(|&&s| s >= t).count() as f64 / self.impostor.len() as f64
    }

    /// False-reject rate: share of genuine scores `< t`.
    pub fn frr(&self, t: f64) -> f64 {
        self.genuine.iter().filter(|&&s| s < t).count() as f64 / self.genuine.len() as f64
    }

    /// Candidate decision thresholds: one below all scores, midpoints between
    /// adjacent distinct scores, one above all scores.
    pub fn thresholds(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.genuine.iter().chain(&self.impostor).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        let mut t = Vec::with_capacity(all.len() + 1);
        t.push(all[0] - 1.0);
        t.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        t.push(all[all.len() - 1] + 1.0);
        t
    }
}

/// Equal error rate and its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Operating point where FAR equals FRR over [`ScoreSet::thresholds`].
///
/// When FAR and FRR coincide exactly at one or more candidate thresholds the
/// common rate is returned with the midpoint of the first and last such
/// threshold. Otherwise the crossing is interpolated linearly between the two
/// candidates that bracket it.
pub fn compute_eer(scores: &ScoreSet) -> Result<Eer> {
    scores.validate()?;
    let mut g = scores.genuine.clone();
    let mut im = scores.impostor.clone();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);
    let (ng, ni) = (g.len() as f64, im.len() as f64);

    // Sweep thresholds upwards; FAR falls and FRR rises monotonically.
    let ts = scores.thresholds();
    let (mut gi, mut ii) = (0, 0);
    let mut points = Vec::with_capacity(ts.len());
    for &t in &ts {
        while gi < g.len() && g[gi] < t {
            gi += 1;
        }
        while ii < im.len() && im[ii] < t {
            ii += 1;
        }
        points.push((t, (im.len() - ii) as f64 / ni, gi as f64 / ng));
    }

    let zeros: Vec<&(f64, f64, f64)> = points.iter().filter(|(_, far, frr)| far == frr).collect();
    if let (Some(first), Some(last)) = (zeros.first(), zeros.last()) {
        return Ok(Eer {
            eer: first.1,
            threshold: 0.5 * (first.0 + last.0),
        });
    }
    for w in points.windows(2) {
        let (t0, far0, frr0) = w[0];
        let (t1, far1, frr1) = w[1];
        let (d0, d1) = (far0 - frr0, far1 - frr1);
        if d0 > 0.0 && d1 < 0.0 {
            let a = d0 / (d0 - d1);
            return Ok(Eer {
                eer: far0 + a * (far1 - far0),
                threshold: t0 + a * (t1 - t0),
            });
        }
    }
    unreachable!("FAR - FRR goes from 1 to -1 across the candidate thresholds")
}

/// Mann–Whitney AUC: probability that a genuine score beats an impostor
/// score, ties counting one half.
pub fn compute_auc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let mut im = scores.impostor.clone();
    im.sort_by(f64::total_cmp);
    // Twice the U statistic, kept integral so ties stay exact.
    let mut twice_u: u128 = 0;
    for &s in &scores.genuine {
        let below = im.partition_point(|&v| v < s);
        let not_above = im.partition_point(|&v| v <= s);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * scores.genuine.len() as u128 * scores.impostor.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(g: &[f64], i: &[f64]) -> ScoreSet {
        ScoreSet::new(g.to_vec(), i.to_vec()).unwrap()
    }

    #[test]
    fn eer_examples() {
        let e = compute_eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert_eq!(e.eer, 0.0);
        assert!(e.threshold > 0.2 && e.threshold < 0.8);

        assert_eq!(compute_eer(&set(&[0.6, 0.4], &[0.5, 0.3])).unwrap().eer, 0.5);
        assert_eq!(compute_eer(&set(&[0.1, 0.5, 0.7], &[0.7, 0.1, 0.5])).unwrap().eer, 0.5);
    }

    #[test]
    fn eer_interpolates_between_bracketing_thresholds() {
        // Thresholds -0.8, 0.25, 0.35, 0.45, 1.5 give (FAR, FRR) =
        // (1,0), (1/2,0), (1/2,1/3), (0,1/3), (0,1): the crossing lies between
        // 0.35 and 0.45 where FAR - FRR goes 1/6 → -1/3.
        let e = compute_eer(&set(&[0.3, 0.5, 0.5], &[0.2, 0.4])).unwrap();
        let a = (1.0 / 6.0) / (1.0 / 6.0 + 1.0 / 3.0);
        assert!((e.eer - (0.5 - a * 0.5)).abs() < 1e-15);
        assert!((e.threshold - (0.35 + a * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(compute_auc(&set(&[0.6, 0.4], &[0.5, 0.3])).unwrap(), 0.75);
        assert_eq!(compute_auc(&set(&[0.2, 0.4, 0.4], &[0.4, 0.2, 0.4])).unwrap(), 0.5);
    }

    #[test]
    fn empty_and_non_finite_inputs() {
        assert!(matches!(ScoreSet::new(vec![], vec![0.1]), Err(IvfgError::EmptyInput(_))));
        assert!(ScoreSet::new(vec![0.1], vec![f64::NAN]).is_err());
        let bad = ScoreSet {
            genuine: vec![0.5],
            impostor: vec![],
        };
        assert!(compute_eer(&bad).is_err());
        assert!(compute_auc(&bad).is_err());
    }
}
