//! Projector training: triplets of images become quaternions of virtual
//! images, scored by the full objective, and only the projector is updated.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::BackendBundle;
use crate::data::IdentityDataset;
use crate::error::{ensure_dim, IvfgError, Result};
use crate::losses::{embedding_loss_grad, full_objective, LossBreakdown, LossComponents, LossConfig, Target};
use crate::nn::Parameterized;
use crate::optim::{Adam, AdamConfig};
use crate::projector::{mean_latent, KeyVector, Projector, ProjectorConfig};
use crate::seeded_rng;
use crate::types::{FeatureVector, ImageArray, LatentVector};

/// Position of one image inside an [`IdentityDataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub identity: usize,
    pub image: usize,
}

impl ImageRef {
    pub fn resolve<'a>(&self, dataset: &'a IdentityDataset) -> &'a ImageArray {
        &dataset.identities()[self.identity].images[self.image]
    }
}

/// `{x1, x2, y}`: two distinct images of one identity and one image of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub x1: ImageRef,
    pub x2: ImageRef,
    pub y: ImageRef,
}

impl Triplet {
    pub fn pid_x<'a>(&self, dataset: &'a IdentityDataset) -> &'a str {
        &dataset.identities()[self.x1.identity].label
    }

    pub fn pid_y<'a>(&self, dataset: &'a IdentityDataset) -> &'a str {
        &dataset.identities()[self.y.identity].label
    }

    pub fn is_valid(&self) -> bool {
        self.x1.identity == self.x2.identity && self.x1.image != self.x2.image && self.y.identity != self.x1.identity
    }
}

/// One triplet per image of every identity holding at least two images: the
/// image is `x1`, `x2` is another image of the same identity and `y` is drawn
/// from a different identity.
pub fn build_triplets(dataset: &IdentityDataset, seed: u64) -> Result<Vec<Triplet>> {
    let ids = dataset.identities();
    if ids.len() < 2 {
        return Err(IvfgError::InsufficientData(format!(
            "triplets need at least 2 identities, found {}",
            ids.len()
        )));
    }
    if ids.iter().all(|id| id.images.len() < 2) {
        return Err(IvfgError::InsufficientData("triplets need an identity with at least 2 images".into()));
    }
    let mut rng = seeded_rng(seed, 0x7219);
    let mut out = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let n = id.images.len();
        if n < 2 {
            continue;
        }
        for a in 0..n {
            let b = (a + rng.gen_range(1..n)) % n;
            let j = (i + rng.gen_range(1..ids.len())) % ids.len();
            let c = rng.gen_range(0..ids[j].images.len());
            out.push(Triplet {
                x1: ImageRef { identity: i, image: a },
                x2: ImageRef { identity: i, image: b },
                y: ImageRef { identity: j, image: c },
            });
        }
    }
    Ok(out)
}

/// Two distinct uniformly random `n`-bit keys.
pub fn sample_key_pair<R: Rng>(n: usize, rng: &mut R) -> Result<(KeyVector, KeyVector)> {
    if n == 0 {
        return Err(IvfgError::InvalidConfig("keys need at least one bit".into()));
    }
    let k1 = KeyVector::random(n, rng);
    loop {
        let k2 = KeyVector::random(n, rng);
        if k2 != k1 {
            return Ok((k1, k2));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub key_bits: usize,
    pub mean_latent_samples: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            adam: AdamConfig::default(),
            key_bits: 8,
            mean_latent_samples: 4096,
            hidden_layers: 2,
            hidden_width: 128,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(IvfgError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(IvfgError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.key_bits == 0 {
            return Err(IvfgError::InvalidConfig("key_bits must be >= 1".into()));
        }
        if self.mean_latent_samples == 0 {
            return Err(IvfgError::InvalidConfig("mean_latent_samples must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// Projector shape fitted to `bundle`'s encoder and generator.
    pub fn projector_config(&self, bundle: &BackendBundle) -> ProjectorConfig {
        ProjectorConfig {
            feature_dim: bundle.encoder().feature_dim(),
            key_bits: self.key_bits,
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            latent_dim: bundle.generator().latent_dim(),
        }
    }
}

/// Everything one step needs from a triplet and a key pair: encoder
/// representations of `x1`, `x2`, `y` and the recognizer features of `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuaternionInputs {
    pub rep_x1: FeatureVector,
    pub rep_x2: FeatureVector,
    pub rep_y: FeatureVector,
    pub original_x1: FeatureVector,
    pub k1: KeyVector,
    pub k2: KeyVector,
}

impl QuaternionInputs {
    pub fn from_images(
        bundle: &BackendBundle,
        x1: &ImageArray,
        x2: &ImageArray,
        y: &ImageArray,
        k1: KeyVector,
        k2: KeyVector,
    ) -> Result<Self> {
        Ok(Self {
            rep_x1: bundle.encode(x1)?,
            rep_x2: bundle.encode(x2)?,
            rep_y: bundle.encode(y)?,
            original_x1: bundle.recognize(x1)?,
            k1,
            k2,
        })
    }
}

/// The full objective on one quaternion `T(x1,k1), T(x1,k2), T(x2,k1), T(y,k1)`
/// and its gradient w.r.t. the projector parameters (flat layout).
pub fn objective_gradient(
    projector: &Projector,
    bundle: &BackendBundle,
    q: &QuaternionInputs,
    z_bar: &LatentVector,
    loss: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let generator = bundle.generator();
    let recognizer = bundle.recognizer();
    ensure_dim("mean latent", generator.latent_dim(), z_bar.dim())?;
    let inputs = [(&q.rep_x1, &q.k1), (&q.rep_x1, &q.k2), (&q.rep_x2, &q.k1), (&q.rep_y, &q.k1)];

    let mut p_traces = Vec::with_capacity(4);
    let mut g_traces = Vec::with_capacity(4);
    let mut r_traces = Vec::with_capacity(4);
    for (rep, key) in inputs {
        let pt = projector.forward_trace(rep, key)?;
        let gt = generator.forward_trace(&pt.output().data)?;
        let rt = recognizer.forward_trace(&gt.output().data)?;
        p_traces.push(pt);
        g_traces.push(gt);
        r_traces.push(rt);
    }
    let feats: Vec<&[f64]> = r_traces.iter().map(|t| t.output().data.as_slice()).collect();
    let latents: Vec<&[f64]> = p_traces.iter().map(|t| t.output().data.as_slice()).collect();

    let m = loss.margin;
    let (pri, d_pri, _) = embedding_loss_grad(feats[0], q.original_x1.as_slice(), Target::Different, m)?;
    let (con, d_con0, d_con1) = embedding_loss_grad(feats[0], feats[1], Target::Different, m)?;
    let (intra, d_intra0, d_intra2) = embedding_loss_grad(feats[0], feats[2], Target::Same, m)?;
    let (inter, d_inter0, d_inter3) = embedding_loss_grad(feats[0], feats[3], Target::Different, m)?;
    let reg = latents
        .iter()
        .map(|z| z.iter().zip(z_bar.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / 4.0;
    let breakdown = full_objective(LossComponents { pri, con, intra, inter, reg }, loss);

    let w = loss.weights;
    let dim = feats[0].len();
    let mut d_feat = vec![vec![0.0; dim]; 4];
    let mut add = |slot: usize, weight: f64, g: &[f64]| {
        if weight != 0.0 {
            for (d, v) in d_feat[slot].iter_mut().zip(g) {
                *d += weight * v;
            }
        }
    };
    add(0, w.pri, &d_pri);
    add(0, w.con, &d_con0);
    add(1, w.con, &d_con1);
    add(0, w.intra, &d_intra0);
    add(2, w.intra, &d_intra2);
    add(0, w.inter, &d_inter0);
    add(3, w.inter, &d_inter3);

    let mut grads = vec![0.0; projector.param_count()];
    for i in 0..4 {
        let mut d_z = if d_feat[i].iter().any(|v| *v != 0.0) {
            let d_img = recognizer.backward_input(&r_traces[i], &d_feat[i]);
            generator.backward_input(&g_traces[i], &d_img)
        } else {
            vec![0.0; latents[i].len()]
        };
        if w.reg != 0.0 {
            for ((d, z), zb) in d_z.iter_mut().zip(latents[i]).zip(z_bar.as_slice()) {
                *d += w.reg * 2.0 * (z - zb) / 4.0;
            }
        }
        if d_z.iter().any(|v| *v != 0.0) {
            projector.backward(&p_traces[i], &d_z, &mut grads);
        }
    }
    Ok((breakdown, grads))
}

/// One optimizer update of the projector on one quaternion.
pub fn train_step(
    projector: &mut Projector,
    adam: &mut Adam,
    bundle: &BackendBundle,
    q: &QuaternionInputs,
    z_bar: &LatentVector,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    if !bundle.is_frozen() {
        return Err(IvfgError::NotFrozen);
    }
    let (breakdown, grads) = objective_gradient(projector, bundle, q, z_bar, loss)?;
    if !breakdown.total.is_finite() {
        return Err(IvfgError::NonConvergence(format!("objective became {}", breakdown.total)));
    }
    let mut params = projector.flat_params();
    adam.step(&mut params, &grads);
    projector.set_flat_params(&params);
    Ok(breakdown)
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub projector: Projector,
    pub log: Vec<EpochLog>,
    pub z_bar: LatentVector,
}

pub fn train(dataset: &IdentityDataset, bundle: &BackendBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, bundle, cfg, &mut |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with_progress(
    dataset: &IdentityDataset,
    bundle: &BackendBundle,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if !bundle.is_frozen() {
        return Err(IvfgError::NotFrozen);
    }
    cfg.validate()?;
    let mut triplets = build_triplets(dataset, cfg.seed)?;
    let z_bar = mean_latent(bundle.generator(), cfg.mean_latent_samples, cfg.seed)?;
    let mut projector = Projector::init(&cfg.projector_config(bundle), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, projector.param_count());

    // E and R are frozen, so their outputs on real images are computed once.
    let mut reps = Vec::new();
    let mut originals = Vec::new();
    for id in dataset.identities() {
        reps.push(id.images.iter().map(|x| bundle.encode(x)).collect::<Result<Vec<_>>>()?);
        originals.push(id.images.iter().map(|x| bundle.recognize(x)).collect::<Result<Vec<_>>>()?);
    }
    let rep = |r: ImageRef| reps[r.identity][r.image].clone();

    let mut rng = seeded_rng(cfg.seed, 0x5732);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        triplets.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for t in &triplets {
            let (k1, k2) = sample_key_pair(cfg.key_bits, &mut rng)?;
            let q = QuaternionInputs {
                rep_x1: rep(t.x1),
                rep_x2: rep(t.x2),
                rep_y: rep(t.y),
                original_x1: originals[t.x1.identity][t.x1.image].clone(),
                k1,
                k2,
            };
            let b = train_step(&mut projector, &mut adam, bundle, &q, &z_bar, &cfg.loss)?;
            sum.pri += b.pri;
            sum.con += b.con;
            sum.intra += b.intra;
            sum.inter += b.inter;
            sum.reg += b.reg;
            sum.total += b.total;
        }
        let n = triplets.len() as f64;
        let entry = EpochLog {
            epoch,
            losses: LossBreakdown {
                pri: sum.pri / n,
                con: sum.con / n,
                intra: sum.intra / n,
                inter: sum.inter / n,
                reg: sum.reg / n,
                total: sum.total / n,
            },
        };
        on_epoch(&entry);
        log.push(entry);
    }
    projector.quantize_to_f32();
    Ok(TrainOutcome { projector, log, z_bar })
}
