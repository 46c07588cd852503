//! The three frozen models behind the projector: encoder `E`, generator `G`
//! and recognizer `R`, plus the desk-scale pretraining that produces them.
//!
//! All three share one convolutional backbone layout: each entry of
//! [`BackboneConfig::widths`] is a `3×3` convolution, SiLU and a 2× resize
//! (average pooling going down, nearest upsampling going up).
//!
//! The generator owns a fixed mapping `w = latent_scale · z` from its
//! standard-normal prior into the latent space the projector targets, and its
//! network starts by dividing the scale back out. The scale therefore leaves
//! pretraining untouched and only sets the units in which latent distances,
//! and so the latent regularizer, are measured.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::IdentityDataset;
use crate::error::{ensure_dim, IvfgError, Result};
use crate::nn::{Conv2d, Layer, Linear, Parameterized, Sequential, Trace};
use crate::optim::{Adam, AdamConfig};
use crate::seeded_rng;
use crate::types::{FeatureVector, ImageArray, LatentVector};

/// Shapes shared by the three backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub resolution: usize,
    pub channels: usize,
    /// Convolution widths from the image side inwards.
    pub widths: Vec<usize>,
    /// Encoder feature dimension `d_f`.
    pub feature_dim: usize,
    /// Recognizer feature dimension `d_r`.
    pub recognizer_dim: usize,
    /// Generator latent dimension `d_w`.
    pub latent_dim: usize,
    /// Scale of the prior-to-latent mapping.
    pub latent_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 3,
            widths: vec![16, 32, 64],
            feature_dim: 64,
            recognizer_dim: 64,
            latent_dim: 64,
            latent_scale: 0.01,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IvfgError::InvalidConfig(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("backbone widths must be a non-empty list of positive integers".into());
        }
        let factor = 1usize << self.widths.len();
        if self.resolution < factor || self.resolution % factor != 0 {
            return bad(format!(
                "resolution {} is not divisible by 2^{} (one halving per width)",
                self.resolution,
                self.widths.len()
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3".into());
        }
        if self.feature_dim == 0 || self.recognizer_dim == 0 || self.latent_dim == 0 {
            return bad("feature and latent dimensions must be positive".into());
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return bad("latent_scale must be positive".into());
        }
        Ok(())
    }

    fn base(&self) -> usize {
        self.resolution >> self.widths.len()
    }

    fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    fn header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        h.insert("resolution".into(), self.resolution.to_string());
        h.insert("channels".into(), self.channels.to_string());
        h.insert(
            "widths".into(),
            self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        h.insert("feature_dim".into(), self.feature_dim.to_string());
        h.insert("recognizer_dim".into(), self.recognizer_dim.to_string());
        h.insert("latent_dim".into(), self.latent_dim.to_string());
        h.insert("latent_scale".into(), format!("{:?}", self.latent_scale));
        h
    }

    fn from_header(ck: &Checkpoint) -> Result<Self> {
        let cfg = Self {
            resolution: ck.config_usize("resolution")?,
            channels: ck.config_usize("channels")?,
            widths: ck.config_list("widths")?,
            feature_dim: ck.config_usize("feature_dim")?,
            recognizer_dim: ck.config_usize("recognizer_dim")?,
            latent_dim: ck.config_usize("latent_dim")?,
            latent_scale: ck.config_f64("latent_scale")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Downsampling conv stack ending in a linear head of size `out_dim`.
fn conv_trunk<R: Rng>(cfg: &BackboneConfig, out_dim: usize, rng: &mut R) -> Sequential {
    let mut layers = Vec::new();
    let mut c = cfg.channels;
    for &w in &cfg.widths {
        layers.push(Layer::Conv(Conv2d::new(c, w, 3, rng)));
        layers.push(Layer::Silu);
        layers.push(Layer::AvgPool2);
        c = w;
    }
    let flat = c * cfg.base() * cfg.base();
    layers.push(Layer::Reshape(vec![flat]));
    layers.push(Layer::Linear(Linear::new(flat, out_dim, rng)));
    Sequential::new(vec![cfg.channels, cfg.resolution, cfg.resolution], layers)
}

fn linear_apply(l: &Linear, x: &[f64]) -> Vec<f64> {
    let mut y = l.bias.clone();
    for (o, row) in y.iter_mut().zip(l.weight.chunks(l.inputs)) {
        *o += crate::types::dot(row, x);
    }
    y
}

fn check_image(cfg: &BackboneConfig, img: &ImageArray, context: &'static str) -> Result<()> {
    ensure_dim(context, cfg.resolution, img.size())?;
    ensure_dim(context, cfg.channels, img.channels())
}

/// Encoder `E`: image to facial representation. A variational head maps the
/// representation to a prior-space code used only to pretrain the generator
/// and to measure reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: BackboneConfig,
    trunk: Sequential,
    mean_head: Linear,
    logvar_head: Linear,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        Self {
            cfg: cfg.clone(),
            trunk: conv_trunk(cfg, cfg.feature_dim, rng),
            mean_head: Linear::new(cfg.feature_dim, cfg.latent_dim, rng),
            logvar_head: Linear::new(cfg.feature_dim, cfg.latent_dim, rng),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    /// `E(x)`: deterministic `d_f`-dimensional representation.
    pub fn encode(&self, image: &ImageArray) -> Result<FeatureVector> {
        check_image(&self.cfg, image, "encoder input")?;
        Ok(FeatureVector(self.trunk.forward(image.data())?.data))
    }

    /// Posterior mean of the prior-space code for `image`.
    pub fn latent_code(&self, image: &ImageArray) -> Result<Vec<f64>> {
        let f = self.encode(image)?;
        Ok(linear_apply(&self.mean_head, &f.0))
    }
}

impl Parameterized for Encoder {
    fn visit_params(&self, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.trunk.visit_params("trunk", f);
        for (name, l) in [("mean_head", &self.mean_head), ("logvar_head", &self.logvar_head)] {
            f(format!("{name}.weight"), vec![l.outputs, l.inputs], &l.weight);
            f(format!("{name}.bias"), vec![l.outputs], &l.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.trunk.visit_params_mut(f);
        for l in [&mut self.mean_head, &mut self.logvar_head] {
            f(&mut l.weight);
            f(&mut l.bias);
        }
    }
}

/// Generator `G`: latent vector to image, noise-free, `tanh`-bounded output.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    cfg: BackboneConfig,
    net: Sequential,
}

impl Generator {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let dec: Vec<usize> = cfg.widths.iter().rev().copied().collect();
        let base = cfg.base();
        let mut layers = vec![
            Layer::Scale(1.0 / cfg.latent_scale),
            Layer::Linear(Linear::new(cfg.latent_dim, dec[0] * base * base, rng)),
            Layer::Reshape(vec![dec[0], base, base]),
            Layer::Silu,
        ];
        for i in 0..dec.len() {
            let out = dec.get(i + 1).copied().unwrap_or(dec[i]);
            layers.push(Layer::Upsample2);
            layers.push(Layer::Conv(Conv2d::new(dec[i], out, 3, rng)));
            layers.push(Layer::Silu);
        }
        layers.push(Layer::Conv(Conv2d::new(*dec.last().unwrap(), cfg.channels, 3, rng)));
        layers.push(Layer::Tanh);
        Self {
            cfg: cfg.clone(),
            net: Sequential::new(vec![cfg.latent_dim], layers),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// Maps a prior-space vector into the latent space `G` consumes.
    pub fn map(&self, prior: &[f64]) -> LatentVector {
        LatentVector(prior.iter().map(|v| v * self.cfg.latent_scale).collect())
    }

    /// Draws one latent from the standard-normal prior, mapped into latent space.
    pub fn sample_latent<R: Rng>(&self, rng: &mut R) -> LatentVector {
        let z: Vec<f64> = (0..self.cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        self.map(&z)
    }

    /// `G(w)`.
    pub fn generate(&self, latent: &LatentVector) -> Result<ImageArray> {
        ensure_dim("generator latent", self.cfg.latent_dim, latent.dim())?;
        let out = self.net.forward(latent.as_slice())?;
        Ok(self.to_image(out.data))
    }

    fn to_image(&self, data: Vec<f64>) -> ImageArray {
        // tanh already bounds the output; the clamp only guards rounding at ±1.
        let data = data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        ImageArray::from_raw(self.cfg.resolution, self.cfg.channels, data)
    }

    pub(crate) fn forward_trace(&self, latent: &[f64]) -> Result<Trace> {
        self.net.forward_trace(latent)
    }

    /// Gradient w.r.t. the latent, parameters untouched.
    pub(crate) fn backward_input(&self, trace: &Trace, d_image: &[f64]) -> Vec<f64> {
        self.net.backward(trace, d_image, None)
    }
}

impl Parameterized for Generator {
    fn visit_params(&self, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.net.visit_params("net", f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.net.visit_params_mut(f)
    }
}

/// Recognizer `R`: image to identity embedding. Trained as a cosine-margin
/// classifier over the pretraining identities; the embedding before the
/// class head is the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Recognizer {
    cfg: BackboneConfig,
    trunk: Sequential,
    classes: usize,
    /// `classes × d_r` class centres.
    class_weight: Vec<f64>,
}

impl Recognizer {
    pub fn new<R: Rng>(cfg: &BackboneConfig, classes: usize, rng: &mut R) -> Self {
        let class_weight = (0..classes * cfg.recognizer_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            cfg: cfg.clone(),
            trunk: conv_trunk(cfg, cfg.recognizer_dim, rng),
            classes,
            class_weight,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.recognizer_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `R(x)`.
    pub fn recognize(&self, image: &ImageArray) -> Result<FeatureVector> {
        check_image(&self.cfg, image, "recognizer input")?;
        Ok(FeatureVector(self.trunk.forward(image.data())?.data))
    }

    /// Index of the class centre with the highest cosine to `image`'s embedding.
    pub fn classify(&self, image: &ImageArray) -> Result<usize> {
        let f = self.recognize(image)?;
        let d = self.cfg.recognizer_dim;
        let cos = |c: usize| {
            let w = &self.class_weight[c * d..(c + 1) * d];
            crate::types::dot(w, &f.0) / (crate::types::norm(w) * f.norm()).max(1e-300)
        };
        Ok((0..self.classes)
            .max_by(|&a, &b| cos(a).total_cmp(&cos(b)))
            .unwrap_or(0))
    }

    pub(crate) fn forward_trace(&self, image: &[f64]) -> Result<Trace> {
        self.trunk.forward_trace(image)
    }

    /// Gradient w.r.t. the image, parameters untouched.
    pub(crate) fn backward_input(&self, trace: &Trace, d_feature: &[f64]) -> Vec<f64> {
        self.trunk.backward(trace, d_feature, None)
    }
}

impl Parameterized for Recognizer {
    fn visit_params(&self, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.trunk.visit_params("trunk", f);
        f(
            "class_weight".into(),
            vec![self.classes, self.cfg.recognizer_dim],
            &self.class_weight,
        );
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.trunk.visit_params_mut(f);
        f(&mut self.class_weight);
    }
}

/// SHA-256 checksums of the three backend blobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendChecksums {
    pub encoder: String,
    pub generator: String,
    pub recognizer: String,
}

/// `E`, `G` and `R` together. A frozen bundle is only ever read.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendBundle {
    encoder: Encoder,
    generator: Generator,
    recognizer: Recognizer,
    frozen: bool,
}

const ENCODER: &str = "encoder";
const GENERATOR: &str = "generator";
const RECOGNIZER: &str = "recognizer";

impl BackendBundle {
    /// Assembles a bundle; parameters are rounded to checkpoint precision so an
    /// in-memory bundle behaves exactly like its saved copy.
    pub fn new(mut encoder: Encoder, mut generator: Generator, mut recognizer: Recognizer) -> Result<Self> {
        let (e, g, r) = (encoder.config(), generator.config(), recognizer.config());
        if e.resolution != g.resolution || e.resolution != r.resolution || e.channels != g.channels || e.channels != r.channels {
            return Err(IvfgError::InvalidConfig("backends disagree on image shape".into()));
        }
        encoder.quantize_to_f32();
        generator.quantize_to_f32();
        recognizer.quantize_to_f32();
        Ok(Self {
            encoder,
            generator,
            recognizer,
            frozen: false,
        })
    }

    /// Randomly initialized, untrained backends (useful for tests and gradient checks).
    pub fn random(cfg: &BackboneConfig, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed, 0xbac0);
        let encoder = Encoder::new(cfg, &mut rng);
        let generator = Generator::new(cfg, &mut rng);
        let recognizer = Recognizer::new(cfg, classes.max(1), &mut rng);
        Self::new(encoder, generator, recognizer)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn recognizer(&self) -> &Recognizer {
        &self.recognizer
    }

    pub fn resolution(&self) -> usize {
        self.encoder.cfg.resolution
    }

    pub fn encode(&self, image: &ImageArray) -> Result<FeatureVector> {
        self.encoder.encode(image)
    }

    pub fn generate(&self, latent: &LatentVector) -> Result<ImageArray> {
        self.generator.generate(latent)
    }

    pub fn recognize(&self, image: &ImageArray) -> Result<FeatureVector> {
        self.recognizer.recognize(image)
    }

    /// `G(map(code(E(x))))`: the autoencoder reconstruction of `image`.
    pub fn reconstruct(&self, image: &ImageArray) -> Result<ImageArray> {
        let code = self.encoder.latent_code(image)?;
        self.generator.generate(&self.generator.map(&code))
    }

    pub fn checksums(&self) -> BackendChecksums {
        BackendChecksums {
            encoder: checkpoint::checksum(&self.encoder),
            generator: checkpoint::checksum(&self.generator),
            recognizer: checkpoint::checksum(&self.recognizer),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<BackendChecksums> {
        let enc = checkpoint::save(dir, ENCODER, ENCODER, &self.encoder.cfg.header(), &self.encoder)?;
        let gen = checkpoint::save(dir, GENERATOR, GENERATOR, &self.generator.cfg.header(), &self.generator)?;
        let mut rh = self.recognizer.cfg.header();
        rh.insert("classes".into(), self.recognizer.classes.to_string());
        let rec = checkpoint::save(dir, RECOGNIZER, RECOGNIZER, &rh, &self.recognizer)?;
        Ok(BackendChecksums {
            encoder: enc,
            generator: gen,
            recognizer: rec,
        })
    }

    pub fn exists(dir: &Path) -> bool {
        [ENCODER, GENERATOR, RECOGNIZER].iter().all(|n| checkpoint::exists(dir, n))
    }

    /// Loads a saved bundle; the result is frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut rng = seeded_rng(0, 0);
        let ck = checkpoint::read(dir, ENCODER)?;
        let mut encoder = Encoder::new(&BackboneConfig::from_header(&ck)?, &mut rng);
        ck.restore_into(&mut encoder)?;

        let ck = checkpoint::read(dir, GENERATOR)?;
        let mut generator = Generator::new(&BackboneConfig::from_header(&ck)?, &mut rng);
        ck.restore_into(&mut generator)?;

        let ck = checkpoint::read(dir, RECOGNIZER)?;
        let classes = ck.config_usize("classes")?;
        let mut recognizer = Recognizer::new(&BackboneConfig::from_header(&ck)?, classes, &mut rng);
        ck.restore_into(&mut recognizer)?;

        Ok(Self::new(encoder, generator, recognizer)?.freeze())
    }
}

/// Settings for [`pretrain_backends`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub recognizer_epochs: usize,
    pub autoencoder_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the per-dimension KL term against per-pixel squared error.
    pub kl_weight: f64,
    /// Logit scale of the cosine classifier.
    pub cosine_scale: f64,
    /// Additive cosine margin on the target class.
    pub cosine_margin: f64,
    /// Fraction of each identity's images held out for the quality gates.
    pub holdout_fraction: f64,
    pub min_accuracy: f64,
    pub max_reconstruction_error: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            seed: 0,
            recognizer_epochs: 12,
            autoencoder_epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            kl_weight: 5e-3,
            cosine_scale: 16.0,
            cosine_margin: 0.2,
            holdout_fraction: 0.2,
            min_accuracy: 0.9,
            max_reconstruction_error: 0.15,
        }
    }
}

/// Quality measured on the held-out images after pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub recognizer_accuracy: f64,
    pub reconstruction_mae: f64,
    pub train_images: usize,
    pub holdout_images: usize,
    pub checksums: BackendChecksums,
}

/// `(identity index, image)` pairs.
type Sample<'a> = (usize, &'a ImageArray);

fn holdout_split<'a>(dataset: &'a IdentityDataset, fraction: f64, seed: u64) -> (Vec<Sample<'a>>, Vec<Sample<'a>>) {
    let mut rng = seeded_rng(seed, 0x401d);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, id) in dataset.identities().iter().enumerate() {
        let mut idx: Vec<usize> = (0..id.images.len()).collect();
        idx.shuffle(&mut rng);
        let n_hold = if id.images.len() >= 2 {
            ((id.images.len() as f64 * fraction).round() as usize).clamp(1, id.images.len() - 1)
        } else {
            0
        };
        for (j, &k) in idx.iter().enumerate() {
            let s = (i, &id.images[k]);
            if j < n_hold {
                held.push(s)
            } else {
                train.push(s)
            }
        }
    }
    (train, held)
}

/// Cosine-margin softmax cross-entropy. Returns the loss and accumulates
/// gradients w.r.t. the embedding (returned) and class weights (into `d_class`).
fn cosine_softmax_grad(
    feature: &[f64],
    class_weight: &[f64],
    label: usize,
    scale: f64,
    margin: f64,
    d_class: &mut [f64],
) -> (f64, Vec<f64>) {
    let d = feature.len();
    let classes = class_weight.len() / d;
    let fnorm = crate::types::norm(feature).max(1e-12);
    let fhat: Vec<f64> = feature.iter().map(|v| v / fnorm).collect();
    let mut what = Vec::with_capacity(class_weight.len());
    let mut wnorm = Vec::with_capacity(classes);
    for c in 0..classes {
        let w = &class_weight[c * d..(c + 1) * d];
        let n = crate::types::norm(w).max(1e-12);
        wnorm.push(n);
        what.extend(w.iter().map(|v| v / n));
    }
    let logits: Vec<f64> = (0..classes)
        .map(|c| {
            let cos = crate::types::dot(&fhat, &what[c * d..(c + 1) * d]);
            scale * (cos - if c == label { margin } else { 0.0 })
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[label] / z).ln();

    let mut d_fhat = vec![0.0; d];
    for c in 0..classes {
        let g = exps[c] / z - if c == label { 1.0 } else { 0.0 };
        let wc = &what[c * d..(c + 1) * d];
        for k in 0..d {
            d_fhat[k] += scale * g * wc[k];
        }
        // Through w / |w|.
        let d_what: Vec<f64> = fhat.iter().map(|v| scale * g * v).collect();
        let proj = crate::types::dot(&d_what, wc);
        for k in 0..d {
            d_class[c * d + k] += (d_what[k] - wc[k] * proj) / wnorm[c];
        }
    }
    let proj = crate::types::dot(&d_fhat, &fhat);
    let d_feature = d_fhat.iter().zip(&fhat).map(|(g, f)| (g - f * proj) / fnorm).collect();
    (loss, d_feature)
}

fn train_recognizer(rec: &mut Recognizer, train: &[Sample<'_>], cfg: &PretrainConfig) {
    let mut rng = seeded_rng(cfg.seed, 0x4ec0);
    let n_params = rec.param_count();
    let n_trunk = rec.trunk.param_count();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        n_params,
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.recognizer_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = vec![0.0; n_params];
            let (g_trunk, g_class) = grads.split_at_mut(n_trunk);
            for &s in batch {
                let (label, img) = train[s];
                let trace = rec.trunk.forward_trace(img.data()).expect("validated shape");
                let (_, d_feat) = cosine_softmax_grad(
                    &trace.output().data,
                    &rec.class_weight,
                    label,
                    cfg.cosine_scale,
                    cfg.cosine_margin,
                    g_class,
                );
                rec.trunk.backward(&trace, &d_feat, Some(g_trunk));
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            let mut flat = rec.flat_params();
            adam.step(&mut flat, &grads);
            rec.set_flat_params(&flat);
        }
    }
}

fn train_autoencoder(enc: &mut Encoder, gen: &mut Generator, train: &[Sample<'_>], cfg: &PretrainConfig) {
    let mut rng = seeded_rng(cfg.seed, 0xae00);
    let n_enc = enc.param_count();
    let n_trunk = enc.trunk.param_count();
    let n_gen = gen.param_count();
    let lr = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam_enc = Adam::new(lr, n_enc);
    let mut adam_gen = Adam::new(lr, n_gen);
    let d_w = gen.cfg.latent_dim;
    let scale = gen.cfg.latent_scale;
    let beta = cfg.kl_weight / d_w as f64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.autoencoder_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut g_enc = vec![0.0; n_enc];
            let mut g_gen = vec![0.0; n_gen];
            for &s in batch {
                let img = train[s].1;
                let trace = enc.trunk.forward_trace(img.data()).expect("validated shape");
                let feat = &trace.output().data;
                let mean = linear_apply(&enc.mean_head, feat);
                let logvar: Vec<f64> = linear_apply(&enc.logvar_head, feat)
                    .into_iter().map(|v| v.clamp(-8.0, 8.0)).collect();
                let eps: Vec<f64> = (0..d_w).map(|_| rng.sample(StandardNormal)).collect();
                let std: Vec<f64> = logvar.iter().map(|v| (0.5 * v).exp()).collect();
                let latent: Vec<f64> = (0..d_w).map(|k| scale * (mean[k] + eps[k] * std[k])).collect();

                let gtrace = gen.net.forward_trace(&latent).expect("validated shape");
                let out = &gtrace.output().data;
                let n_pix = out.len() as f64;
                let d_out: Vec<f64> = out.iter().zip(img.data()).map(|(o, t)| 2.0 * (o - t) / n_pix).collect();
                let d_latent = gen.net.backward(&gtrace, &d_out, Some(&mut g_gen));

                let mut d_mean = vec![0.0; d_w];
                let mut d_logvar = vec![0.0; d_w];
                for k in 0..d_w {
                    let du = scale * d_latent[k];
                    d_mean[k] = du + beta * mean[k];
                    d_logvar[k] = du * eps[k] * 0.5 * std[k] + beta * 0.5 * (std[k] * std[k] - 1.0);
                }
                let (g_trunk, g_heads) = g_enc.split_at_mut(n_trunk);
                let (g_mean, g_logvar) = g_heads.split_at_mut(g_heads.len() / 2);
                let mut d_feat = vec![0.0; feat.len()];
                for (head, dy, g) in [(&enc.mean_head, &d_mean, g_mean), (&enc.logvar_head, &d_logvar, g_logvar)] {
                    let (gw, gb) = g.split_at_mut(head.weight.len());
                    for o in 0..head.outputs {
                        gb[o] += dy[o];
                        for i in 0..head.inputs {
                            gw[o * head.inputs + i] += dy[o] * feat[i];
                            d_feat[i] += head.weight[o * head.inputs + i] * dy[o];
                        }
                    }
                }
                enc.trunk.backward(&trace, &d_feat, Some(g_trunk));
            }
            let inv = 1.0 / batch.len() as f64;
            g_enc.iter_mut().for_each(|g| *g *= inv);
            g_gen.iter_mut().for_each(|g| *g *= inv);
            let mut flat = enc.flat_params();
            adam_enc.step(&mut flat, &g_enc);
            enc.set_flat_params(&flat);
            let mut flat = gen.flat_params();
            adam_gen.step(&mut flat, &g_gen);
            gen.set_flat_params(&flat);
        }
    }
}

/// Trains `R` as an identity classifier and `E`/`G` as a variational
/// autoencoder on `dataset`, then checks the held-out quality gates
/// (classification accuracy and reconstruction error). The returned bundle
/// is frozen.
pub fn pretrain_backends(dataset: &IdentityDataset, cfg: &PretrainConfig) -> Result<(BackendBundle, PretrainReport)> {
    cfg.backbone.validate()?;
    let usable = dataset.identities().iter().filter(|i| i.images.len() >= 2).count();
    if usable < 10 {
        return Err(IvfgError::InsufficientData(format!(
            "pretraining needs >= 10 identities with >= 2 images, found {usable}"
        )));
    }
    if dataset.resolution() != cfg.backbone.resolution || dataset.channels() != cfg.backbone.channels {
        return Err(IvfgError::DimensionMismatch {
            context: "pretraining dataset resolution",
            expected: cfg.backbone.resolution,
            actual: dataset.resolution(),
        });
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(IvfgError::InvalidConfig("batch_size and learning_rate must be positive".into()));
    }
    debug_assert_eq!(cfg.backbone.image_len(), dataset.identities()[0].images[0].data().len());

    let (train, held) = holdout_split(dataset, cfg.holdout_fraction, cfg.seed);
    let mut rng = seeded_rng(cfg.seed, 0xbac0);
    let mut encoder = Encoder::new(&cfg.backbone, &mut rng);
    let mut generator = Generator::new(&cfg.backbone, &mut rng);
    let mut recognizer = Recognizer::new(&cfg.backbone, dataset.identity_count(), &mut rng);

    train_recognizer(&mut recognizer, &train, cfg);
    train_autoencoder(&mut encoder, &mut generator, &train, cfg);

    let bundle = BackendBundle::new(encoder, generator, recognizer)?.freeze();
    let mut correct = 0usize;
    let mut mae = 0.0;
    for &(label, img) in &held {
        correct += usize::from(bundle.recognizer.classify(img)? == label);
        mae += bundle.reconstruct(img)?.mean_abs_diff(img);
    }
    let n = held.len().max(1) as f64;
    let report = PretrainReport {
        recognizer_accuracy: correct as f64 / n,
        reconstruction_mae: mae / n,
        train_images: train.len(),
        holdout_images: held.len(),
        checksums: bundle.checksums(),
    };
    if report.recognizer_accuracy < cfg.min_accuracy || report.reconstruction_mae > cfg.max_reconstruction_error {
        return Err(IvfgError::NonConvergence(format!(
            "held-out accuracy {:.3} (need >= {}), reconstruction MAE {:.3} (need <= {})",
            report.recognizer_accuracy, cfg.min_accuracy, report.reconstruction_mae, cfg.max_reconstruction_error
        )));
    }
    Ok((bundle, report))
}
