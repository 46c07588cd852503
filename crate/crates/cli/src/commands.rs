//! The subcommands, as library functions over a [`RunConfig`].
//!
//! Artifacts live under `work_dir`:
//!
//! ```text
//! data/              toy dataset (identity folders of PNGs)
//! pretrain-data/     separate population for backend pretraining
//! backends/          frozen E, G, R checkpoints
//! projector/         projector checkpoint and train_log.json
//! virtual/set-a/     virtual test split, one key per identity
//! virtual/set-b/     virtual test split, one shared key
//! reports/           JSON reports, ablation table, feature plots
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ivfg::backends::{pretrain_backends, BackendBundle, PretrainReport};
use ivfg::data::{identity_split, load_dataset, save_dataset, synth_toy_dataset, IdentityDataset};
use ivfg::evaluation::{
    compute_auc, compute_eer, diversity_keys, diversity_rate, export_features, fid, pca_2d, protection_rate,
    read_features, recoverability_rate, verification_scores, MetricsReport, Provenance,
};
use ivfg::pipeline::{assign_keys, batch_transform, load_virtual_set, save_virtual_set, transform, KeyAssignment, KeyMode};
use ivfg::projector::{KeyVector, Projector};
use ivfg::training::{train_with_progress, EpochLog, TrainOutcome};
use ivfg::{FeatureVector, ImageArray, IvfgError};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::plot;

/// Paths of every artifact under a work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pretrain_data(&self) -> PathBuf {
        self.root.join("pretrain-data")
    }

    pub fn backends(&self) -> PathBuf {
        self.root.join("backends")
    }

    pub fn projector(&self) -> PathBuf {
        self.root.join("projector")
    }

    pub fn train_log(&self) -> PathBuf {
        self.projector().join("train_log.json")
    }

    pub fn virtual_set(&self, mode: KeyMode) -> PathBuf {
        self.root.join("virtual").join(mode.to_string())
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn metrics(&self, mode: KeyMode) -> PathBuf {
        self.reports().join(format!("metrics-{mode}.json"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_backends(layout: &Layout) -> Result<BackendBundle> {
    let dir = layout.backends();
    if !BackendBundle::exists(&dir) {
        return Err(IvfgError::MissingArtifact(dir).into());
    }
    Ok(BackendBundle::load(&dir)?)
}

fn load_projector(layout: &Layout) -> Result<Projector> {
    let dir = layout.projector();
    if !Projector::exists(&dir) {
        return Err(IvfgError::MissingArtifact(dir).into());
    }
    Ok(Projector::load(&dir)?)
}

/// The toy dataset's test split.
pub fn test_split(cfg: &RunConfig) -> Result<IdentityDataset> {
    let data = load_dataset(&Layout::new(&cfg.work_dir).data())?;
    Ok(identity_split(&data, [8, 1, 1], cfg.split_seed)?.test)
}

pub fn cmd_synth_data(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.work_dir);
    save_dataset(&synth_toy_dataset(&cfg.data)?, &layout.data())?;
    save_dataset(&synth_toy_dataset(&cfg.pretrain_data)?, &layout.pretrain_data())?;
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    let layout = Layout::new(&cfg.work_dir);
    let corpus = load_dataset(&layout.pretrain_data())?;
    let (bundle, report) = pretrain_backends(&corpus, &cfg.pretrain)?;
    bundle.save(&layout.backends())?;
    write_json(&layout.reports().join("pretrain.json"), &report)?;
    Ok(report)
}

/// Trains a projector with `cfg.train` on the training split.
pub fn train_projector(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<(BackendBundle, TrainOutcome)> {
    let layout = Layout::new(&cfg.work_dir);
    let data = load_dataset(&layout.data())?;
    let bundle = load_backends(&layout)?;
    let split = identity_split(&data, [8, 1, 1], cfg.split_seed)?;
    let outcome = train_with_progress(&split.train, &bundle, &cfg.train, on_epoch)?;
    Ok((bundle, outcome))
}

pub fn cmd_train(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let layout = Layout::new(&cfg.work_dir);
    let (_, outcome) = train_projector(cfg, on_epoch)?;
    outcome.projector.save(&layout.projector())?;
    write_json(&layout.train_log(), &outcome.log)?;
    Ok(outcome)
}

pub fn cmd_generate(cfg: &RunConfig, mode: KeyMode) -> Result<KeyAssignment> {
    let layout = Layout::new(&cfg.work_dir);
    let test = test_split(cfg)?;
    let bundle = load_backends(&layout)?;
    let projector = load_projector(&layout)?;
    let assignment = assign_keys(&test.labels(), mode, projector.config().key_bits, cfg.train.seed)?;
    let virtuals = batch_transform(&bundle, &projector, &test, &assignment)?;
    save_virtual_set(&layout.virtual_set(mode), &virtuals, &assignment)?;
    Ok(assignment)
}

fn flat_images(ds: &IdentityDataset) -> Vec<ImageArray> {
    ds.iter_images().map(|(_, x)| x.clone()).collect()
}

/// Every metric of a virtual copy of `test`. Original-space EER and its
/// threshold come from `test` itself; the threshold is then used for
/// protection, diversity and recoverability.
pub fn evaluate_virtuals(
    cfg: &RunConfig,
    bundle: &BackendBundle,
    projector: &Projector,
    test: &IdentityDataset,
    virtuals: &IdentityDataset,
    assignment: &KeyAssignment,
) -> Result<MetricsReport> {
    if virtuals.labels() != test.labels() || virtuals.image_count() != test.image_count() {
        anyhow::bail!("virtual set does not match the test split; rerun generate");
    }
    let r = bundle.recognizer();
    let seed = cfg.train.seed;
    let original = verification_scores(r, test, cfg.pair_cap, seed)?;
    let original_eer = compute_eer(&original)?;
    let virtual_scores = verification_scores(r, virtuals, cfg.pair_cap, seed)?;
    let virtual_eer = compute_eer(&virtual_scores)?;

    let originals = flat_images(test);
    let virtual_images = flat_images(virtuals);
    let threshold = original_eer.threshold;

    let pairs = diversity_keys(originals.len(), projector.config().key_bits, seed)?;
    let mut by_k1 = Vec::with_capacity(pairs.len());
    let mut by_k2 = Vec::with_capacity(pairs.len());
    for (x, (k1, k2)) in originals.iter().zip(&pairs) {
        by_k1.push(transform(bundle, projector, x, k1)?.quantized());
        by_k2.push(transform(bundle, projector, x, k2)?.quantized());
    }

    let keys = test
        .identities()
        .iter()
        .flat_map(|id| id.images.iter().map(|_| assignment.key(&id.label).cloned()))
        .collect::<ivfg::Result<Vec<KeyVector>>>()?;

    let features = |images: &[ImageArray]| images.iter().map(|x| r.recognize(x)).collect::<ivfg::Result<Vec<FeatureVector>>>();

    let report = MetricsReport {
        original_eer: Some(original_eer.eer),
        original_auc: Some(compute_auc(&original)?),
        eer: Some(virtual_eer.eer),
        eer_threshold: Some(virtual_eer.threshold),
        auc: Some(compute_auc(&virtual_scores)?),
        protection_rate: Some(protection_rate(r, &originals, &virtual_images, threshold)?),
        diversity: Some(diversity_rate(r, &by_k1, &by_k2, threshold)?),
        recoverability: Some(recoverability_rate(bundle, projector, &virtual_images, &keys, &originals, threshold)?),
        fid: Some(fid(&features(&originals)?, &features(&virtual_images)?)?),
        provenance: Provenance {
            dataset: format!(
                "toy {}x{} seed {} (test split, seed {})",
                cfg.data.identity_count, cfg.data.images_per_identity, cfg.data.seed, cfg.split_seed
            ),
            assignment: format!("{} seed {}", assignment.mode, assignment.seed),
            seed,
            config_hash: cfg.hash(),
        },
    };
    report.validate()?;
    Ok(report)
}

pub fn cmd_evaluate(cfg: &RunConfig, mode: KeyMode) -> Result<MetricsReport> {
    let layout = Layout::new(&cfg.work_dir);
    let (virtuals, assignment) = load_virtual_set(&layout.virtual_set(mode))?;
    let test = test_split(cfg)?;
    let bundle = load_backends(&layout)?;
    let projector = load_projector(&layout)?;
    let report = evaluate_virtuals(cfg, &bundle, &projector, &test, &virtuals, &assignment)?;
    write_json(&layout.metrics(mode), &report)?;
    Ok(report)
}

/// Which loss term an ablation run drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Full,
    Pri,
    Con,
    Intra,
    Inter,
    Reg,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::Full, Ablation::Pri, Ablation::Con, Ablation::Intra, Ablation::Inter, Ablation::Reg];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Pri => "w/o pri",
            Ablation::Con => "w/o con",
            Ablation::Intra => "w/o intra",
            Ablation::Inter => "w/o inter",
            Ablation::Reg => "w/o reg",
        }
    }

    /// `cfg` with this run's loss weight set to zero.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut cfg = cfg.clone();
        let w = &mut cfg.train.loss.weights;
        match self {
            Ablation::Full => {}
            Ablation::Pri => w.pri = 0.0,
            Ablation::Con => w.con = 0.0,
            Ablation::Intra => w.intra = 0.0,
            Ablation::Inter => w.inter = 0.0,
            Ablation::Reg => w.reg = 0.0,
        }
        cfg
    }
}

/// One row of the ablation table. "Same key" is the Set-B virtual EER and
/// "different keys" the Set-A one; the other columns use Set-A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: Ablation,
    pub protection: f64,
    pub diversity: f64,
    pub eer_same_key: f64,
    pub eer_different_keys: f64,
    pub fid: f64,
}

/// Trains and evaluates one ablation configuration entirely in memory.
pub fn ablation_row(cfg: &RunConfig, run: Ablation, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<AblationRow> {
    let cfg = run.apply(cfg);
    let (bundle, outcome) = train_projector(&cfg, on_epoch)?;
    let p = &outcome.projector;
    let test = test_split(&cfg)?;
    let eval = |mode| -> Result<MetricsReport> {
        let assignment = assign_keys(&test.labels(), mode, p.config().key_bits, cfg.train.seed)?;
        let virtuals = batch_transform(&bundle, p, &test, &assignment)?;
        evaluate_virtuals(&cfg, &bundle, p, &test, &virtuals, &assignment)
    };
    let a = eval(KeyMode::SetA)?;
    let b = eval(KeyMode::SetB)?;
    let get = |v: Option<f64>| v.expect("evaluate_virtuals fills every field");
    Ok(AblationRow {
        run,
        protection: get(a.protection_rate),
        diversity: get(a.diversity),
        eer_same_key: get(b.eer),
        eer_different_keys: get(a.eer),
        fid: get(a.fid),
    })
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("run\tprotection\tdiversity\teer_same_key\teer_different_keys\tfid\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            r.run.label(),
            r.protection,
            r.diversity,
            r.eer_same_key,
            r.eer_different_keys,
            r.fid
        ));
    }
    out
}

pub fn cmd_ablate(cfg: &RunConfig, on_row: &mut dyn FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let layout = Layout::new(&cfg.work_dir);
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for run in Ablation::ALL {
        let row = ablation_row(cfg, run, &mut |_| {})?;
        on_row(&row);
        rows.push(row);
    }
    write_json(&layout.reports().join("ablation.json"), &rows)?;
    let path = layout.reports().join("ablation.tsv");
    std::fs::write(&path, ablation_table(&rows)).with_context(|| format!("writing {}", path.display()))?;
    Ok(rows)
}

/// Exports recognizer features of the test split and its Set-A virtual copy,
/// then draws their 2-D PCA projection. Returns the PNG path.
pub fn cmd_plot_features(cfg: &RunConfig) -> Result<PathBuf> {
    let layout = Layout::new(&cfg.work_dir);
    let (virtuals, _) = load_virtual_set(&layout.virtual_set(KeyMode::SetA))?;
    let test = test_split(cfg)?;
    let bundle = load_backends(&layout)?;
    let tsv = layout.reports().join("features.tsv");
    export_features(&tsv, bundle.recognizer(), &[(&test, ""), (&virtuals, plot::VIRTUAL_SUFFIX)])?;
    let rows = read_features(&tsv)?;
    let feats: Vec<FeatureVector> = rows.iter().map(|r| r.feature.clone()).collect();
    let points = pca_2d(&feats)?;
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    let png = layout.reports().join("features.png");
    plot::scatter(&png, &points, &labels)?;
    Ok(png)
}
