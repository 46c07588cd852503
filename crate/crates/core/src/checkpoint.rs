//! Checkpoint format shared by every model.
//!
//! A checkpoint is two files in one directory:
//!
//! * `<name>.manifest`: UTF-8 `key=value` lines. Fixed keys are `format`,
//!   `model`, `blob`, `sha256` and `floats`; `config.*` keys carry the
//!   architecture needed to rebuild the model; each `param.<name>` line holds
//!   `<shape>@<byte offset>` with the shape written as `AxBxC`.
//! * `<name>.bin`: all parameters as little-endian `f32`, in manifest order.
//!
//! The SHA-256 of the blob is both the integrity check on load and the model
//! checksum used by the freeze contract.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{IvfgError, Result};
use crate::nn::Parameterized;

const FORMAT: &str = "ivfg-checkpoint/1";

/// A parsed, integrity-checked checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: String,
    pub config: BTreeMap<String, String>,
    pub params: Vec<(String, Vec<usize>)>,
    pub values: Vec<f64>,
    pub sha256: String,
    manifest: PathBuf,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| IvfgError::corrupt(&self.manifest, format!("missing config.{key}")))
    }

    pub fn config_usize(&self, key: &str) -> Result<usize> {
        let v = self.config_value(key)?;
        v.parse()
            .map_err(|_| IvfgError::corrupt(&self.manifest, format!("config.{key}={v} is not an integer")))
    }

    pub fn config_f64(&self, key: &str) -> Result<f64> {
        let v = self.config_value(key)?;
        v.parse()
            .map_err(|_| IvfgError::corrupt(&self.manifest, format!("config.{key}={v} is not a number")))
    }

    pub fn config_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.config_value(key)?;
        v.split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| IvfgError::corrupt(&self.manifest, format!("config.{key}={v} is not a list")))
    }

    /// Copies the stored values into `model` after checking that the stored
    /// layout (names and shapes) is exactly the model's layout.
    pub fn restore_into(&self, model: &mut dyn Parameterized) -> Result<()> {
        let mut layout = Vec::new();
        model.visit_params(&mut |name, shape, _| layout.push((name, shape)));
        if layout != self.params {
            return Err(IvfgError::corrupt(
                &self.manifest,
                "parameter names or shapes do not match the configured architecture",
            ));
        }
        model.set_flat_params(&self.values);
        Ok(())
    }
}

fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.manifest"))
}

fn blob_name(name: &str) -> String {
    format!("{name}.bin")
}

pub fn exists(dir: &Path, name: &str) -> bool {
    manifest_path(dir, name).is_file() && dir.join(blob_name(name)).is_file()
}

fn to_blob(model: &dyn Parameterized) -> Vec<u8> {
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    model.visit_params(&mut |_, _, values| {
        for v in values {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    });
    blob
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the model's checkpoint blob.
pub fn checksum(model: &dyn Parameterized) -> String {
    sha256_hex(&to_blob(model))
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes `<name>.manifest` and `<name>.bin` into `dir`, returning the blob checksum.
pub fn save(
    dir: &Path,
    name: &str,
    model_kind: &str,
    config: &BTreeMap<String, String>,
    model: &dyn Parameterized,
) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| IvfgError::io(dir, e))?;
    let blob = to_blob(model);
    let sha = sha256_hex(&blob);

    let mut manifest = String::new();
    let _ = writeln!(manifest, "format={FORMAT}");
    let _ = writeln!(manifest, "model={model_kind}");
    let _ = writeln!(manifest, "blob={}", blob_name(name));
    let _ = writeln!(manifest, "sha256={sha}");
    let _ = writeln!(manifest, "floats={}", blob.len() / 4);
    for (k, v) in config {
        let _ = writeln!(manifest, "config.{k}={v}");
    }
    let mut offset = 0usize;
    model.visit_params(&mut |pname, shape, values| {
        let _ = writeln!(manifest, "param.{pname}={}@{offset}", shape_string(&shape));
        offset += values.len() * 4;
    });

    let blob_path = dir.join(blob_name(name));
    fs::write(&blob_path, &blob).map_err(|e| IvfgError::io(&blob_path, e))?;
    let mpath = manifest_path(dir, name);
    fs::write(&mpath, manifest).map_err(|e| IvfgError::io(&mpath, e))?;
    Ok(sha)
}

/// Reads and verifies a checkpoint: manifest syntax, contiguous offsets,
/// blob length and blob hash.
pub fn read(dir: &Path, name: &str) -> Result<Checkpoint> {
    let mpath = manifest_path(dir, name);
    if !mpath.is_file() {
        return Err(IvfgError::MissingArtifact(mpath));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| IvfgError::io(&mpath, e))?;
    let bad = |reason: String| IvfgError::corrupt(&mpath, reason);

    let mut fixed = BTreeMap::new();
    let mut config = BTreeMap::new();
    let mut params = Vec::new();
    let mut offsets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {} is not key=value", lineno + 1)))?;
        if let Some(k) = key.strip_prefix("config.") {
            config.insert(k.to_string(), value.to_string());
        } else if let Some(p) = key.strip_prefix("param.") {
            let (shape, offset) = value
                .split_once('@')
                .ok_or_else(|| bad(format!("param.{p} lacks an @offset")))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("param.{p} has a malformed shape")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| bad(format!("param.{p} has a malformed offset")))?;
            params.push((p.to_string(), shape));
            offsets.push(offset);
        } else {
            fixed.insert(key.to_string(), value.to_string());
        }
    }

    let field = |k: &str| fixed.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
    if field("format")? != FORMAT {
        return Err(bad("unsupported format".into()));
    }
    let model = field("model")?;
    let sha = field("sha256")?;
    let floats: usize = field("floats")?
        .parse()
        .map_err(|_| bad("floats is not an integer".into()))?;

    let mut expected = 0usize;
    for ((pname, shape), offset) in params.iter().zip(&offsets) {
        if *offset != expected {
            return Err(bad(format!("param.{pname} offset {offset}, expected {expected}")));
        }
        expected += shape.iter().product::<usize>() * 4;
    }
    if expected != floats * 4 {
        return Err(bad(format!("shapes cover {} floats, manifest says {floats}", expected / 4)));
    }

    let bpath = dir.join(field("blob")?);
    let blob = fs::read(&bpath).map_err(|e| IvfgError::io(&bpath, e))?;
    if blob.len() != expected {
        return Err(bad(format!("blob has {} bytes, expected {expected}", blob.len())));
    }
    if sha256_hex(&blob) != sha {
        return Err(bad("blob checksum mismatch".into()));
    }
    let values = blob
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();

    Ok(Checkpoint {
        model,
        config,
        params,
        values,
        sha256: sha,
        manifest: mpath,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Linear, Sequential};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Toy(Sequential);

    impl Parameterized for Toy {
        fn visit_params(&self, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
            self.0.visit_params("toy", f)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
            self.0.visit_params_mut(f)
        }
    }

    fn toy(seed: u64) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Toy(Sequential::new(
            vec![3],
            vec![Layer::Linear(Linear::new(3, 2, &mut rng)), Layer::Silu],
        ));
        t.quantize_to_f32();
        t
    }

    #[test]
    fn save_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy(1);
        let mut cfg = BTreeMap::new();
        cfg.insert("width".to_string(), "2".to_string());
        let sha = save(dir.path(), "toy", "toy", &cfg, &model).unwrap();
        assert_eq!(sha, checksum(&model));

        let ck = read(dir.path(), "toy").unwrap();
        assert_eq!(ck.config_usize("width").unwrap(), 2);
        let mut other = toy(2);
        ck.restore_into(&mut other).unwrap();
        assert_eq!(other.flat_params(), model.flat_params());
        assert_eq!(checksum(&other), sha);

        let text = fs::read_to_string(dir.path().join("toy.manifest")).unwrap();
        assert!(text.contains("param.toy.0.weight=2x3@0"));
        assert!(text.contains("param.toy.0.bias=2@24"));
    }

    #[test]
    fn edited_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), "toy", "toy", &BTreeMap::new(), &toy(1)).unwrap();
        let mpath = dir.path().join("toy.manifest");
        let text = fs::read_to_string(&mpath).unwrap().replace("=2x3@0", "=3x3@0");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(
            read(dir.path(), "toy"),
            Err(IvfgError::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), "toy", "toy", &BTreeMap::new(), &toy(1)).unwrap();
        let bpath = dir.path().join("toy.bin");
        let mut blob = fs::read(&bpath).unwrap();
        blob[0] ^= 1;
        fs::write(&bpath, blob).unwrap();
        assert!(matches!(
            read(dir.path(), "toy"),
            Err(IvfgError::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn missing_manifest_is_a_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read(dir.path(), "nope"), Err(IvfgError::MissingArtifact(_))));
    }
}
