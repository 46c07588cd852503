//! The latent projector `P`: concatenates a facial representation with a
//! binary key and maps the result through an MLP into the generator's latent
//! space. It is the only trainable component during IVFG training.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::Generator;
use crate::checkpoint;
use crate::error::{ensure_dim, IvfgError, Result};
use crate::nn::{Layer, Linear, Parameterized, Sequential, Trace};
use crate::seeded_rng;
use crate::types::{FeatureVector, LatentVector};

/// An `n`-digit binary key selecting the virtual identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyVector(Vec<u8>);

impl KeyVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(IvfgError::InvalidConfig("keys need at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(IvfgError::InvalidConfig(format!("key digit {b} is not binary")));
        }
        Ok(Self(bits))
    }

    /// Uniformly random key of `n` bits.
    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        Self((0..n).map(|_| rng.gen_range(0..=1u8)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    /// Bits as projector inputs: `0 → -1`, `1 → +1`.
    pub fn signed(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 })
    }

    /// The same key with bit `i` inverted.
    pub fn with_flipped(&self, i: usize) -> Self {
        let mut bits = self.0.clone();
        bits[i] ^= 1;
        Self(bits)
    }
}

impl fmt::Display for KeyVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for KeyVector {
    type Err = IvfgError;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(IvfgError::InvalidConfig(format!("key character {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }
}

impl Serialize for KeyVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KeyVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Shape of the projector MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub feature_dim: usize,
    pub key_bits: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
}

impl ProjectorConfig {
    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.key_bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.key_bits == 0 || self.latent_dim == 0 {
            return Err(IvfgError::InvalidConfig(
                "projector feature_dim, key_bits and latent_dim must be positive".into(),
            ));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(IvfgError::InvalidConfig("hidden_width must be positive".into()));
        }
        Ok(())
    }

    fn header(&self) -> BTreeMap<String, String> {
        [
            ("feature_dim", self.feature_dim),
            ("key_bits", self.key_bits),
            ("hidden_layers", self.hidden_layers),
            ("hidden_width", self.hidden_width),
            ("latent_dim", self.latent_dim),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

/// Projector parameters: an MLP with `hidden_layers` SiLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    cfg: ProjectorConfig,
    net: Sequential,
}

const PROJECTOR: &str = "projector";

impl Projector {
    /// Seeded fan-in uniform initialization, rounded to checkpoint precision.
    pub fn init(cfg: &ProjectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed, 0x9e0);
        let mut layers = Vec::new();
        let mut width = cfg.input_dim();
        for _ in 0..cfg.hidden_layers {
            layers.push(Layer::Linear(Linear::new(width, cfg.hidden_width, &mut rng)));
            layers.push(Layer::Silu);
            width = cfg.hidden_width;
        }
        layers.push(Layer::Linear(Linear::new(width, cfg.latent_dim, &mut rng)));
        let mut p = Self {
            cfg: cfg.clone(),
            net: Sequential::new(vec![cfg.input_dim()], layers),
        };
        p.quantize_to_f32();
        Ok(p)
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.cfg
    }

    fn input(&self, representation: &FeatureVector, key: &KeyVector) -> Result<Vec<f64>> {
        ensure_dim("projector representation", self.cfg.feature_dim, representation.dim())?;
        ensure_dim("projector key", self.cfg.key_bits, key.len())?;
        let mut x = Vec::with_capacity(self.cfg.input_dim());
        x.extend_from_slice(representation.as_slice());
        x.extend(key.signed());
        Ok(x)
    }

    /// `P(r, k)`.
    pub fn project(&self, representation: &FeatureVector, key: &KeyVector) -> Result<LatentVector> {
        let x = self.input(representation, key)?;
        Ok(LatentVector(self.net.forward(&x)?.data))
    }

    pub(crate) fn forward_trace(&self, representation: &FeatureVector, key: &KeyVector) -> Result<Trace> {
        let x = self.input(representation, key)?;
        self.net.forward_trace(&x)
    }

    /// Accumulates parameter gradients for `d_latent` into `grads`.
    pub(crate) fn backward(&self, trace: &Trace, d_latent: &[f64], grads: &mut [f64]) {
        self.net.backward(trace, d_latent, Some(grads));
    }

    pub fn checksum(&self) -> String {
        checkpoint::checksum(self)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        checkpoint::save(dir, PROJECTOR, PROJECTOR, &self.cfg.header(), self)
    }

    pub fn exists(dir: &Path) -> bool {
        checkpoint::exists(dir, PROJECTOR)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::read(dir, PROJECTOR)?;
        let cfg = ProjectorConfig {
            feature_dim: ck.config_usize("feature_dim")?,
            key_bits: ck.config_usize("key_bits")?,
            hidden_layers: ck.config_usize("hidden_layers")?,
            hidden_width: ck.config_usize("hidden_width")?,
            latent_dim: ck.config_usize("latent_dim")?,
        };
        let mut p = Self::init(&cfg, 0)?;
        ck.restore_into(&mut p)?;
        Ok(p)
    }
}

impl Parameterized for Projector {
    fn visit_params(&self, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.net.visit_params("mlp", f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.net.visit_params_mut(f)
    }
}

/// Mean of `m` latents drawn from the generator prior and mapped into the
/// latent space, the anchor of the regularizer.
pub fn mean_latent(generator: &Generator, m: usize, seed: u64) -> Result<LatentVector> {
    if m < 1 {
        return Err(IvfgError::InvalidConfig("mean_latent needs m >= 1 samples".into()));
    }
    let mut rng = seeded_rng(seed, 0x3ea7);
    let mut sum = vec![0.0; generator.latent_dim()];
    for _ in 0..m {
        let w = generator.sample_latent(&mut rng);
        for (s, v) in sum.iter_mut().zip(w.as_slice()) {
            *s += v;
        }
    }
    Ok(LatentVector(sum.into_iter().map(|s| s / m as f64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackboneConfig, BackendBundle};

    fn toy_cfg() -> ProjectorConfig {
        ProjectorConfig {
            feature_dim: 64,
            key_bits: 8,
            hidden_layers: 2,
            hidden_width: 128,
            latent_dim: 64,
        }
    }

    #[test]
    fn key_parsing_and_display() {
        let k: KeyVector = "01101".parse().unwrap();
        assert_eq!(k.bits(), &[0, 1, 1, 0, 1]);
        assert_eq!(k.to_string(), "01101");
        assert_eq!(k.signed().collect::<Vec<_>>(), vec![-1.0, 1.0, 1.0, -1.0, 1.0]);
        assert!("012".parse::<KeyVector>().is_err());
        assert!("".parse::<KeyVector>().is_err());
        assert!(KeyVector::new(vec![2]).is_err());
        assert_eq!(k.with_flipped(0).to_string(), "11101");
    }

    #[test]
    fn toy_shapes_and_determinism() {
        let p = Projector::init(&toy_cfg(), 1).unwrap();
        assert_eq!(p.net.input_len(), 72);
        let r = FeatureVector((0..64).map(|i| (i as f64).sin()).collect());
        let k: KeyVector = "10110010".parse().unwrap();
        let z = p.project(&r, &k).unwrap();
        assert_eq!(z.dim(), 64);
        assert_eq!(z, p.project(&r, &k).unwrap());
        assert_eq!(Projector::init(&toy_cfg(), 1).unwrap(), p);
        assert_ne!(Projector::init(&toy_cfg(), 2).unwrap(), p);
    }

    #[test]
    fn dimension_mismatches() {
        let p = Projector::init(&toy_cfg(), 1).unwrap();
        let k: KeyVector = "10110010".parse().unwrap();
        assert!(p.project(&FeatureVector(vec![1.0; 63]), &k).is_err());
        assert!(p.project(&FeatureVector(vec![1.0; 64]), &"101".parse().unwrap()).is_err());
    }

    #[test]
    fn hand_evaluated_two_two_two_mlp() {
        // d_f = 1, n = 1, one hidden layer of width 2, d_w = 2.
        let cfg = ProjectorConfig {
            feature_dim: 1,
            key_bits: 1,
            hidden_layers: 1,
            hidden_width: 2,
            latent_dim: 2,
        };
        let mut p = Projector::init(&cfg, 0).unwrap();
        // W1 = [[0.5, -1], [2, 0.25]], b1 = [0.1, -0.2]; W2 = [[1, -1], [0.5, 3]], b2 = [0.3, 0].
        p.set_flat_params(&[0.5, -1.0, 2.0, 0.25, 0.1, -0.2, 1.0, -1.0, 0.5, 3.0, 0.3, 0.0]);
        // Input: r = 0, key bit 0 encoded as -1 → x = (0, -1).
        let h = [0.1 + 1.0, -0.2 - 0.25];
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let a = [silu(h[0]), silu(h[1])];
        let expected = [a[0] - a[1] + 0.3, 0.5 * a[0] + 3.0 * a[1]];
        let z = p.project(&FeatureVector(vec![0.0]), &"0".parse().unwrap()).unwrap();
        assert!((z.0[0] - expected[0]).abs() < 1e-15);
        assert!((z.0[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = Projector::init(&toy_cfg(), 3).unwrap();
        let sha = p.save(dir.path()).unwrap();
        let q = Projector::load(dir.path()).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.checksum(), sha);

        let mpath = dir.path().join("projector.manifest");
        let text = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, text.replace("=128x72@0", "=128x71@0")).unwrap();
        assert!(Projector::load(dir.path()).is_err());
    }

    #[test]
    fn mean_latent_behaviour() {
        let cfg = BackboneConfig {
            resolution: 8,
            widths: vec![4],
            latent_dim: 16,
            latent_scale: 1.0,
            ..BackboneConfig::default()
        };
        let b = BackendBundle::random(&cfg, 2, 0).unwrap();
        let g = b.generator();
        assert!(mean_latent(g, 0, 1).is_err());

        let one = mean_latent(g, 1, 7).unwrap();
        let mut rng = seeded_rng(7, 0x3ea7);
        assert_eq!(one, g.sample_latent(&mut rng));

        assert_eq!(mean_latent(g, 50, 9).unwrap(), mean_latent(g, 50, 9).unwrap());
        assert_ne!(mean_latent(g, 50, 9).unwrap(), mean_latent(g, 51, 9).unwrap());

        let big = mean_latent(g, 10_000, 11).unwrap();
        assert!(big.0.iter().all(|v| v.abs() < 0.05), "{:?}", big.0);
    }
}
