//! Verification scores and the privacy/utility metrics of virtual faces.

mod features;
mod fid;
mod verification;

pub use features::{pca_2d, read_features, write_features, LabeledFeature};
pub use fid::fid;
pub use verification::{compute_auc, compute_eer, Eer, ScoreSet};

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendBundle, Recognizer};
use crate::data::IdentityDataset;
use crate::error::{IvfgError, Result};
use crate::projector::{KeyVector, Projector};
use crate::seeded_rng;
use crate::training::ImageRef;
use crate::types::{cosine_similarity, FeatureVector, ImageArray};

/// Cosine similarity of the recognizer features of two images.
pub fn match_score(recognizer: &Recognizer, a: &ImageArray, b: &ImageArray) -> Result<f64> {
    cosine_similarity(recognizer.recognize(a)?.as_slice(), recognizer.recognize(b)?.as_slice())
}

/// Default cap on each of the genuine and impostor pair lists.
pub const DEFAULT_PAIR_CAP: usize = 3000;

/// Verification pairs over one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairs {
    pub genuine: Vec<(ImageRef, ImageRef)>,
    pub impostor: Vec<(ImageRef, ImageRef)>,
}

/// All same-identity pairs of distinct images as genuine pairs and all
/// cross-identity pairs as impostors. A list longer than `cap` is replaced by
/// a seeded sample of `cap` pairs.
pub fn build_pairs(dataset: &IdentityDataset, cap: usize, seed: u64) -> Result<Pairs> {
    let ids = dataset.identities();
    if ids.len() < 2 || ids.iter().all(|id| id.images.len() < 2) {
        return Err(IvfgError::InsufficientData(
            "pairs need at least 2 identities and one identity with 2 images".into(),
        ));
    }
    if cap == 0 {
        return Err(IvfgError::InvalidConfig("pair cap must be positive".into()));
    }
    let refs: Vec<ImageRef> = ids
        .iter()
        .enumerate()
        .flat_map(|(i, id)| (0..id.images.len()).map(move |j| ImageRef { identity: i, image: j }))
        .collect();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (a, ra) in refs.iter().enumerate() {
        for rb in &refs[a + 1..] {
            if ra.identity == rb.identity {
                genuine.push((*ra, *rb));
            } else {
                impostor.push((*ra, *rb));
            }
        }
    }
    let mut rng = seeded_rng(seed, 0xa125);
    let mut limit = |mut list: Vec<(ImageRef, ImageRef)>| {
        if list.len() > cap {
            list.shuffle(&mut rng);
            list.truncate(cap);
            list.sort_by_key(|(a, b)| (a.identity, a.image, b.identity, b.image));
        }
        list
    };
    let genuine = limit(genuine);
    let impostor = limit(impostor);
    Ok(Pairs { genuine, impostor })
}

/// Recognizer features of every image, indexed like the dataset.
pub fn dataset_features(recognizer: &Recognizer, dataset: &IdentityDataset) -> Result<Vec<Vec<FeatureVector>>> {
    dataset
        .identities()
        .iter()
        .map(|id| id.images.iter().map(|x| recognizer.recognize(x)).collect())
        .collect()
}

/// Scores `pairs` from precomputed features.
pub fn score_pairs(features: &[Vec<FeatureVector>], pairs: &Pairs) -> Result<ScoreSet> {
    let score = |list: &[(ImageRef, ImageRef)]| -> Result<Vec<f64>> {
        list.iter()
            .map(|(a, b)| {
                cosine_similarity(
                    features[a.identity][a.image].as_slice(),
                    features[b.identity][b.image].as_slice(),
                )
            })
            .collect()
    };
    ScoreSet::new(score(&pairs.genuine)?, score(&pairs.impostor)?)
}

/// Genuine/impostor scores of a whole dataset under the given pair protocol.
pub fn verification_scores(recognizer: &Recognizer, dataset: &IdentityDataset, cap: usize, seed: u64) -> Result<ScoreSet> {
    let pairs = build_pairs(dataset, cap, seed)?;
    score_pairs(&dataset_features(recognizer, dataset)?, &pairs)
}

fn aligned_scores(recognizer: &Recognizer, a: &[ImageArray], b: &[ImageArray]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(IvfgError::BatchMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(IvfgError::EmptyInput("image pairs"));
    }
    a.iter().zip(b).map(|(x, y)| match_score(recognizer, x, y)).collect()
}

fn share(scores: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    scores.iter().filter(|&&s| pred(s)).count() as f64 / scores.len() as f64
}

/// Share of (original, virtual) pairs that fail to match: score `< threshold`.
pub fn protection_rate(recognizer: &Recognizer, originals: &[ImageArray], virtuals: &[ImageArray], threshold: f64) -> Result<f64> {
    Ok(share(&aligned_scores(recognizer, originals, virtuals)?, |s| s < threshold))
}

/// Share of virtual pairs made from one image with two keys that fail to match.
pub fn diversity_rate(recognizer: &Recognizer, virtuals_k1: &[ImageArray], virtuals_k2: &[ImageArray], threshold: f64) -> Result<f64> {
    Ok(share(&aligned_scores(recognizer, virtuals_k1, virtuals_k2)?, |s| s < threshold))
}

/// `count` seeded pairs of distinct `n`-bit keys, one per image in a
/// diversity measurement.
pub fn diversity_keys(count: usize, n: usize, seed: u64) -> Result<Vec<(KeyVector, KeyVector)>> {
    let mut rng = seeded_rng(seed, 0xd1e5);
    (0..count).map(|_| crate::training::sample_key_pair(n, &mut rng)).collect()
}

/// Share of virtual images that, passed through `transform` again with their
/// key, match their original: score `>= threshold`.
pub fn recoverability_rate_with(
    recognizer: &Recognizer,
    virtuals: &[ImageArray],
    keys: &[KeyVector],
    originals: &[ImageArray],
    threshold: f64,
    transform: impl Fn(&ImageArray, &KeyVector) -> Result<ImageArray>,
) -> Result<f64> {
    if keys.len() != virtuals.len() {
        return Err(IvfgError::BatchMismatch(virtuals.len(), keys.len()));
    }
    let recovered = virtuals
        .iter()
        .zip(keys)
        .map(|(v, k)| transform(v, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(share(&aligned_scores(recognizer, &recovered, originals)?, |s| s >= threshold))
}

/// [`recoverability_rate_with`] using the deployed transform.
pub fn recoverability_rate(
    bundle: &BackendBundle,
    projector: &Projector,
    virtuals: &[ImageArray],
    keys: &[KeyVector],
    originals: &[ImageArray],
    threshold: f64,
) -> Result<f64> {
    recoverability_rate_with(bundle.recognizer(), virtuals, keys, originals, threshold, |x, k| {
        crate::pipeline::transform(bundle, projector, x, k)
    })
}

/// Labeled recognizer features of every image in `datasets`; a dataset's rows
/// are labeled `<identity><suffix>`.
pub fn export_features(path: &Path, recognizer: &Recognizer, datasets: &[(&IdentityDataset, &str)]) -> Result<usize> {
    let mut rows = Vec::new();
    for (ds, suffix) in datasets {
        for id in ds.identities() {
            for img in &id.images {
                rows.push(LabeledFeature {
                    label: format!("{}{suffix}", id.label),
                    feature: recognizer.recognize(img)?,
                });
            }
        }
    }
    write_features(path, &rows)?;
    Ok(rows.len())
}

/// Where a report's numbers came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: String,
    pub assignment: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Metrics of one evaluation run; fields a run does not compute stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub original_eer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub original_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eer_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protection_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recoverability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    pub provenance: Provenance,
}

impl MetricsReport {
    /// Checks every populated value against its mathematical range.
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("original_eer", self.original_eer),
            ("original_auc", self.original_auc),
            ("eer", self.eer),
            ("auc", self.auc),
            ("protection_rate", self.protection_rate),
            ("diversity", self.diversity),
            ("recoverability", self.recoverability),
        ];
        for (name, v) in rates {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(IvfgError::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        if let Some(f) = self.fid {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(IvfgError::InvalidConfig(format!("fid = {f} is not a finite non-negative value")));
            }
        }
        Ok(())
    }
}
