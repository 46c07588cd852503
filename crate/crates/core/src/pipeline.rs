//! The deployed transform `T(x, k) = G(P(E(x), k))` and key assignment for
//! whole datasets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::BackendBundle;
use crate::data::{load_dataset, save_dataset, Identity, IdentityDataset};
use crate::error::{IvfgError, Result};
use crate::projector::{KeyVector, Projector};
use crate::seeded_rng;
use crate::types::ImageArray;

/// `T(x, k)`.
pub fn transform(bundle: &BackendBundle, projector: &Projector, image: &ImageArray, key: &KeyVector) -> Result<ImageArray> {
    let r = bundle.encode(image)?;
    let z = projector.project(&r, key)?;
    bundle.generate(&z)
}

/// How identities receive keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyMode {
    /// Set-A: an independently drawn key per identity.
    SetA,
    /// Set-B: one drawn key shared by every identity.
    SetB,
}

impl std::fmt::Display for KeyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KeyMode::SetA => "set-a",
            KeyMode::SetB => "set-b",
        })
    }
}

impl std::str::FromStr for KeyMode {
    type Err = IvfgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set-a" | "a" | "A" => Ok(KeyMode::SetA),
            "set-b" | "b" | "B" => Ok(KeyMode::SetB),
            other => Err(IvfgError::InvalidConfig(format!("unknown key mode {other:?}; use set-a or set-b"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyAssignment {
    pub mode: KeyMode,
    pub seed: u64,
    pub keys: BTreeMap<String, KeyVector>,
}

impl KeyAssignment {
    pub fn key(&self, label: &str) -> Result<&KeyVector> {
        self.keys
            .get(label)
            .ok_or_else(|| IvfgError::InvalidConfig(format!("no key assigned to identity {label:?}")))
    }

    /// Number of identities whose key is also held by another identity.
    pub fn collisions(&self) -> usize {
        let mut counts: BTreeMap<&KeyVector, usize> = BTreeMap::new();
        for k in self.keys.values() {
            *counts.entry(k).or_default() += 1;
        }
        counts.values().filter(|&&c| c > 1).sum()
    }
}

pub fn assign_keys(labels: &[&str], mode: KeyMode, n: usize, seed: u64) -> Result<KeyAssignment> {
    if n == 0 {
        return Err(IvfgError::InvalidConfig("keys need at least one bit".into()));
    }
    let mut rng = seeded_rng(seed, 0xa551);
    let shared = KeyVector::random(n, &mut rng);
    let keys = labels
        .iter()
        .map(|l| {
            let k = match mode {
                KeyMode::SetA => KeyVector::random(n, &mut rng),
                KeyMode::SetB => shared.clone(),
            };
            (l.to_string(), k)
        })
        .collect();
    Ok(KeyAssignment { mode, seed, keys })
}

/// Transforms every image with its identity's key. Labels are preserved and
/// the output is rounded to the 8-bit grid used on disk, so an in-memory
/// virtual set equals its saved copy.
pub fn batch_transform(
    bundle: &BackendBundle,
    projector: &Projector,
    dataset: &IdentityDataset,
    assignment: &KeyAssignment,
) -> Result<IdentityDataset> {
    let identities = dataset
        .identities()
        .iter()
        .map(|id| {
            let key = assignment.key(&id.label)?;
            let images = id
                .images
                .iter()
                .map(|x| transform(bundle, projector, x, key).map(|v| v.quantized()))
                .collect::<Result<Vec<_>>>()?;
            Ok(Identity {
                label: id.label.clone(),
                images,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    IdentityDataset::new(identities)
}

pub const ASSIGNMENT_FILE: &str = "assignment.json";

/// Writes the virtual images in the dataset layout plus `assignment.json`.
pub fn save_virtual_set(root: &Path, virtuals: &IdentityDataset, assignment: &KeyAssignment) -> Result<()> {
    save_dataset(virtuals, root)?;
    let path = root.join(ASSIGNMENT_FILE);
    let json = serde_json::to_string_pretty(assignment)?;
    std::fs::write(&path, json).map_err(|e| IvfgError::io(&path, e))
}

pub fn load_virtual_set(root: &Path) -> Result<(IdentityDataset, KeyAssignment)> {
    let path = root.join(ASSIGNMENT_FILE);
    if !path.is_file() {
        return Err(IvfgError::MissingArtifact(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| IvfgError::io(&path, e))?;
    let assignment: KeyAssignment = serde_json::from_str(&text)?;
    Ok((load_dataset(root)?, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackboneConfig;
    use crate::data::{synth_toy_dataset, ToyDatasetSpec};
    use crate::projector::ProjectorConfig;

    fn fixture() -> (BackendBundle, Projector, IdentityDataset) {
        let cfg = BackboneConfig {
            resolution: 8,
            widths: vec![4],
            latent_scale: 1.0,
            ..BackboneConfig::default()
        };
        let bundle = BackendBundle::random(&cfg, 3, 2).unwrap().freeze();
        let projector = Projector::init(
            &ProjectorConfig {
                feature_dim: cfg.feature_dim,
                key_bits: 4,
                hidden_layers: 2,
                hidden_width: 16,
                latent_dim: cfg.latent_dim,
            },
            5,
        )
        .unwrap();
        let ds = synth_toy_dataset(&ToyDatasetSpec {
            identity_count: 3,
            images_per_identity: 2,
            resolution: 8,
            ..ToyDatasetSpec::default()
        })
        .unwrap();
        (bundle, projector, ds)
    }

    #[test]
    fn transform_is_the_composition() {
        let (b, p, ds) = fixture();
        let x = &ds.identities()[0].images[0];
        let k: KeyVector = "0110".parse().unwrap();
        let out = transform(&b, &p, x, &k).unwrap();
        let by_hand = b.generate(&p.project(&b.encode(x).unwrap(), &k).unwrap()).unwrap();
        assert_eq!(out, by_hand);
        assert_eq!(out, transform(&b, &p, x, &k).unwrap());
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(transform(&b, &p, x, &"01".parse().unwrap()).is_err());
    }

    #[test]
    fn key_modes() {
        let labels = ["a", "b", "c", "d", "e"];
        let b = assign_keys(&labels, KeyMode::SetB, 8, 1).unwrap();
        let first = b.key("a").unwrap();
        assert!(b.keys.values().all(|k| k == first));
        assert_eq!(b.collisions(), 5);

        let many: Vec<String> = (0..30).map(|i| format!("id_{i:03}")).collect();
        let refs: Vec<&str> = many.iter().map(String::as_str).collect();
        let a = assign_keys(&refs, KeyMode::SetA, 8, 3).unwrap();
        assert_eq!(a, assign_keys(&refs, KeyMode::SetA, 8, 3).unwrap());
        assert_eq!(a.keys.len(), 30);
        assert!(a.keys.values().all(|k| k.len() == 8));

        let tiny = assign_keys(&["x", "y", "z"], KeyMode::SetA, 1, 0).unwrap();
        assert!(tiny.collisions() >= 2);
        assert!(assign_keys(&labels, KeyMode::SetA, 0, 0).is_err());
        assert!(b.key("zz").is_err());
        assert_eq!("set-a".parse::<KeyMode>().unwrap(), KeyMode::SetA);
        assert_eq!(KeyMode::SetB.to_string().parse::<KeyMode>().unwrap(), KeyMode::SetB);
        assert!("c".parse::<KeyMode>().is_err());
    }

    #[test]
    fn batch_transform_round_trips_through_disk() {
        let (b, p, ds) = fixture();
        let labels = ds.labels();
        let assignment = assign_keys(&labels, KeyMode::SetA, 4, 9).unwrap();
        let virtuals = batch_transform(&b, &p, &ds, &assignment).unwrap();
        assert_eq!(virtuals.labels(), ds.labels());
        assert_eq!(virtuals.image_count(), ds.image_count());
        let x = &ds.identities()[1].images[1];
        let k = assignment.key(&ds.identities()[1].label).unwrap();
        assert_eq!(virtuals.identities()[1].images[1], transform(&b, &p, x, k).unwrap().quantized());

        let dir = tempfile::tempdir().unwrap();
        save_virtual_set(dir.path(), &virtuals, &assignment).unwrap();
        let (loaded, la) = load_virtual_set(dir.path()).unwrap();
        assert_eq!(loaded, virtuals);
        assert_eq!(la, assignment);
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(ASSIGNMENT_FILE)).unwrap()).unwrap();
        assert_eq!(json["keys"][labels[0]], serde_json::json!(assignment.key(labels[0]).unwrap().to_string()));

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_virtual_set(empty.path()), Err(IvfgError::MissingArtifact(_))));
    }
}
