//! Flat `key = value` run configuration.
//!
//! Keys are the dotted field paths of [`RunConfig`], e.g. `train.epochs` or
//! `train.loss.weights.reg`. A file may set any subset; the rest keep their
//! defaults. Lines starting with `#` are comments. List values are written
//! comma-separated (`pretrain.backbone.widths = 16,32,64`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ivfg::backends::PretrainConfig;
use ivfg::data::ToyDatasetSpec;
use ivfg::evaluation::DEFAULT_PAIR_CAP;
use ivfg::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Root directory for every artifact of the run.
    pub work_dir: PathBuf,
    /// The dataset the projector is trained and evaluated on.
    pub data: ToyDatasetSpec,
    /// Seed of the 8:1:1 identity split.
    pub split_seed: u64,
    /// The separate population the backends are pretrained on.
    pub pretrain_data: ToyDatasetSpec,
    pub pretrain: PretrainConfig,
    /// Projector training. `train.seed` also seeds key assignment and
    /// evaluation pairs.
    pub train: TrainConfig,
    /// Upper bound on genuine and impostor pairs per verification run.
    pub pair_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("ivfg-run"),
            data: ToyDatasetSpec::default(),
            split_seed: 0,
            pretrain_data: ToyDatasetSpec::pretraining_corpus(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            pair_cap: DEFAULT_PAIR_CAP,
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys come from a flattened object");
            }
        }
    }
    Value::Object(root)
}

/// Parses `raw` with the type of `like`.
fn parse_value(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let raw = raw.trim();
    let number = |s: &str, integer: bool| -> Result<Value> {
        if integer {
            let v: u64 = s.parse().with_context(|| format!("{key}: expected a non-negative integer, got {s:?}"))?;
            Ok(Value::from(v))
        } else {
            let v: f64 = s.parse().with_context(|| format!("{key}: expected a number, got {s:?}"))?;
            Number::from_f64(v).map(Value::Number).ok_or_else(|| anyhow!("{key}: {s:?} is not finite"))
        }
    };
    match like {
        Value::Number(n) => number(raw, n.is_u64()),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Bool(_) => Ok(Value::Bool(raw.parse().with_context(|| format!("{key}: expected true or false"))?)),
        Value::Array(items) => {
            let integer = items.first().map_or(true, |v| v.is_u64());
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| number(s.trim(), integer))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        _ => bail!("{key}: unsupported value type"),
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

impl RunConfig {
    fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies `key = value` assignments in order. Unknown keys are errors.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut flat = self.flat();
        for (key, raw) in assignments {
            let key = key.trim();
            let like = flat.get(key).ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
            let v = parse_value(key, raw, like)?;
            flat.insert(key.to_string(), v);
        }
        *self = serde_json::from_value(unflatten(&flat)).context("config values out of range")?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", i + 1))?;
            pairs.push((k, v));
        }
        let mut cfg = Self::default();
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    /// Reads `path` if given, then applies `--key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", p.display()))?
            }
            None => Self::default(),
        };
        let pairs = overrides
            .iter()
            .map(|o| {
                o.strip_prefix("--")
                    .and_then(|s| s.split_once('='))
                    .ok_or_else(|| anyhow!("override {o:?} is not of the form --key=value"))
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.apply(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.pretrain.backbone.validate()?;
        if self.data.resolution != self.pretrain.backbone.resolution
            || self.pretrain_data.resolution != self.pretrain.backbone.resolution
        {
            bail!("data resolutions must equal pretrain.backbone.resolution");
        }
        if self.pair_cap == 0 {
            bail!("pair_cap must be >= 1");
        }
        Ok(())
    }

    /// Every key with its value, one `key = value` line each, sorted by key.
    pub fn render(&self) -> String {
        self.flat().iter().map(|(k, v)| format!("{k} = {}\n", render_value(v))).collect()
    }

    /// SHA-256 of [`RunConfig::render`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn keys(&self) -> Vec<String> {
        self.flat().into_keys().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.train.adam.learning_rate, 3e-4);
        assert_eq!((c.train.adam.beta1, c.train.adam.beta2), (0.9, 0.999));
        assert_eq!(c.train.epochs, 20);
        assert_eq!(c.train.key_bits, 8);
        assert_eq!(c.train.hidden_layers, 2);
        assert_eq!(c.train.loss.margin, 0.4);
        let w = c.train.loss.weights;
        assert_eq!([w.pri, w.con, w.intra, w.inter, w.reg], [0.1, 1.0, 1.0, 1.0, 20.0]);
        assert_eq!((c.data.identity_count, c.data.images_per_identity, c.data.resolution), (30, 10, 32));
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.apply([("train.epochs", "3"), ("pretrain.backbone.widths", "4, 8"), ("work_dir", "/tmp/x")])
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.pretrain.backbone.widths, vec![4, 8]);
        let back = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\ntrain.epochs = 5\ntrain.adam.learning_rate = 1e-3\n\n").unwrap();
        let c = RunConfig::load(Some(&path), &["--train.epochs=7".into()]).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.adam.learning_rate, 1e-3);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::parse("no_such_key = 1").is_err());
        assert!(RunConfig::parse("train.epochs").is_err());
        assert!(RunConfig::parse("train.epochs = -1").is_err());
        assert!(RunConfig::parse("train.epochs = 2.5").is_err());
        assert!(RunConfig::parse("train.adam.learning_rate = fast").is_err());
        assert!(RunConfig::load(None, &["train.epochs=3".into()]).is_err());
        assert!(RunConfig::load(None, &["--train.epochs=0".into()]).is_err());
        assert!(RunConfig::load(None, &["--data.resolution=16".into()]).is_err());
        assert!(RunConfig::default().keys().contains(&"train.loss.weights.con".to_string()));
    }
}
