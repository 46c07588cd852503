//! Identity-grouped image datasets: the procedural toy-face generator, the
//! on-disk layout, and identity-disjoint splitting.
//!
//! On disk a dataset is `<root>/<identity-label>/<index>.png`, 8-bit lossless,
//! mapped to `[-1, 1]` with `v / 127.5 - 1`.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{IvfgError, Result};
use crate::seeded_rng;
use crate::types::{to_u8, ImageArray};

/// All images of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub label: String,
    pub images: Vec<ImageArray>,
}

/// Images grouped by identity. Labels are unique, every identity has at least
/// one image and all images share one resolution and channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    identities: Vec<Identity>,
    resolution: usize,
    channels: usize,
}

impl IdentityDataset {
    pub fn new(identities: Vec<Identity>) -> Result<Self> {
        let first = identities
            .iter()
            .flat_map(|id| id.images.first())
            .next()
            .ok_or(IvfgError::EmptyInput("dataset has no images"))?;
        let (resolution, channels) = (first.size(), first.channels());
        let mut labels = std::collections::BTreeSet::new();
        for id in &identities {
            if id.images.is_empty() {
                return Err(IvfgError::InsufficientData(format!(
                    "identity {} has no images",
                    id.label
                )));
            }
            if !labels.insert(id.label.as_str()) {
                return Err(IvfgError::InvalidConfig(format!("duplicate label {}", id.label)));
            }
            if let Some(img) = id
                .images
                .iter()
                .find(|i| i.size() != resolution || i.channels() != channels)
            {
                return Err(IvfgError::InvalidImage(format!(
                    "mixed resolution in {}: {}x{}x{} vs {resolution}x{resolution}x{channels}",
                    id.label,
                    img.size(),
                    img.size(),
                    img.channels()
                )));
            }
        }
        Ok(Self {
            identities,
            resolution,
            channels,
        })
    }

    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn image_count(&self) -> usize {
        self.identities.iter().map(|i| i.images.len()).sum()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.identities.iter().map(|i| i.label.as_str()).collect()
    }

    /// Every image with its identity index, in dataset order.
    pub fn iter_images(&self) -> impl Iterator<Item = (usize, &ImageArray)> {
        self.identities
            .iter()
            .enumerate()
            .flat_map(|(i, id)| id.images.iter().map(move |img| (i, img)))
    }
}

/// Parameters of the procedural toy-face dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub identity_count: usize,
    pub images_per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Scales every per-image jitter bound; 1.0 is the default look.
    pub variation: f64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            identity_count: 30,
            images_per_identity: 10,
            resolution: 32,
            seed: 0,
            variation: 1.0,
        }
    }
}

impl ToyDatasetSpec {
    /// A separate, larger population for pretraining the backends, drawn
    /// from its own seed so it shares no identities with the default set.
    pub fn pretraining_corpus() -> Self {
        Self {
            identity_count: 120,
            images_per_identity: 5,
            seed: 1000,
            ..Self::default()
        }
    }
}

/// A soft-edged ellipse in unit image coordinates.
#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
}

/// The identity-defining parameters: background plus the face parts, drawn
/// back to front.
#[derive(Debug, Clone)]
struct FaceParams {
    background: [f64; 3],
    parts: Vec<Blob>,
}

fn color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn sample_face<R: Rng>(rng: &mut R) -> FaceParams {
    let cx = rng.gen_range(0.44..0.56);
    let cy = rng.gen_range(0.48..0.58);
    let rx = rng.gen_range(0.26..0.40);
    let ry = rng.gen_range(0.32..0.44);
    let hair = Blob {
        cx,
        cy: cy - ry * rng.gen_range(0.45..0.8),
        rx: rx * rng.gen_range(0.9..1.25),
        ry: ry * rng.gen_range(0.5..0.8),
        color: color(rng, -1.0, 0.4),
    };
    let face = Blob {
        cx,
        cy,
        rx,
        ry,
        color: color(rng, -0.3, 0.95),
    };
    let eye_dx = rng.gen_range(0.08..0.16);
    let eye_dy = rng.gen_range(0.03..0.13);
    let eye_r = rng.gen_range(0.035..0.075);
    let eye_color = color(rng, -1.0, 0.6);
    let eyes = [-1.0, 1.0].map(|side| Blob {
        cx: cx + side * eye_dx,
        cy: cy - eye_dy,
        rx: eye_r,
        ry: eye_r * 0.8,
        color: eye_color,
    });
    let mouth = Blob {
        cx,
        cy: cy + rng.gen_range(0.12..0.24),
        rx: rng.gen_range(0.06..0.16),
        ry: rng.gen_range(0.025..0.055),
        color: color(rng, -1.0, 0.8),
    };
    FaceParams {
        background: color(rng, -1.0, 0.2),
        parts: vec![hair, face, eyes[0], eyes[1], mouth],
    }
}

/// Rasterizes one jittered instance of `face`.
fn render_face<R: Rng>(face: &FaceParams, size: usize, variation: f64, rng: &mut R) -> ImageArray {
    let shift = 0.05 * variation;
    let (tx, ty) = if shift > 0.0 {
        (rng.gen_range(-shift..shift), rng.gen_range(-shift..shift))
    } else {
        (0.0, 0.0)
    };
    let scale = 1.0 + 0.04 * variation * rng.gen_range(-1.0..1.0);
    let gain = 0.06 * variation * rng.gen_range(-1.0..1.0);
    let noise = 0.02 * variation;
    let softness = 1.5 / size as f64;

    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let mut px = face.background;
            for b in &face.parts {
                let (bx, by) = (0.5 + (b.cx - 0.5) * scale + tx, 0.5 + (b.cy - 0.5) * scale + ty);
                let d = (((u - bx) / (b.rx * scale)).powi(2) + ((v - by) / (b.ry * scale)).powi(2)).sqrt();
                let edge = (b.rx.min(b.ry) * scale).max(1e-6);
                let alpha = 1.0 / (1.0 + (-(1.0 - d) * edge / softness).exp());
                for c in 0..3 {
                    px[c] += alpha * (b.color[c] - px[c]);
                }
            }
            for c in 0..3 {
                let n: f64 = if noise > 0.0 { rng.sample::<f64, _>(StandardNormal) * noise } else { 0.0 };
                data[c * plane + y * size + x] = (px[c] + gain + n).clamp(-1.0, 1.0);
            }
        }
    }
    ImageArray::from_raw(size, 3, data).quantized()
}

/// Generates the toy-face dataset. Each identity is a seeded set of blob
/// parameters; each image applies bounded seeded jitter (translation, scale,
/// global gain, pixel noise) to them. Jitter bounds are small compared with
/// the ranges identity parameters are drawn from. Pixel values are snapped
/// to the 8-bit grid so the in-memory dataset equals its on-disk copy.
pub fn synth_toy_dataset(spec: &ToyDatasetSpec) -> Result<IdentityDataset> {
    if spec.identity_count < 2 || spec.images_per_identity < 2 {
        return Err(IvfgError::InvalidConfig(
            "toy dataset needs >= 2 identities and >= 2 images per identity".into(),
        ));
    }
    if spec.resolution < 4 || !(0.0..=4.0).contains(&spec.variation) {
        return Err(IvfgError::InvalidConfig("toy resolution must be >= 4 and variation in [0, 4]".into()));
    }
    let identities = (0..spec.identity_count)
        .map(|i| {
            let mut rng = seeded_rng(spec.seed, 0x1d00 + i as u64);
            let face = sample_face(&mut rng);
            let images = (0..spec.images_per_identity)
                .map(|_| render_face(&face, spec.resolution, spec.variation, &mut rng))
                .collect();
            Identity {
                label: format!("id{i:03}"),
                images,
            }
        })
        .collect();
    IdentityDataset::new(identities)
}

fn image_to_png(img: &ImageArray, path: &Path) -> Result<()> {
    let size = img.size() as u32;
    let plane = img.size() * img.size();
    let data = img.data();
    let res = if img.channels() == 1 {
        GrayImage::from_fn(size, size, |x, y| {
            image::Luma([to_u8(data[(y * size + x) as usize])])
        })
        .save(path)
    } else {
        RgbImage::from_fn(size, size, |x, y| {
            let i = (y * size + x) as usize;
            image::Rgb([to_u8(data[i]), to_u8(data[plane + i]), to_u8(data[2 * plane + i])])
        })
        .save(path)
    };
    res.map_err(|source| IvfgError::Codec {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes one PNG into `[-1, 1]`.
pub fn read_png(path: &Path) -> Result<ImageArray> {
    let dynimg = image::open(path).map_err(|source| IvfgError::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    if w != h {
        return Err(IvfgError::InvalidImage(format!("{} is {w}x{h}, not square", path.display())));
    }
    let map = |u: u8| f64::from(u) / 127.5 - 1.0;
    let img = if dynimg.color().has_color() {
        let rgb = dynimg.to_rgb8();
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = map(px[c]);
            }
        }
        ImageArray::from_raw(w, 3, data)
    } else {
        let gray = dynimg.to_luma8();
        ImageArray::from_raw(w, 1, gray.pixels().map(|p| map(p[0])).collect())
    };
    Ok(img)
}

/// Writes the dataset as `<root>/<label>/<index>.png`.
pub fn save_dataset(dataset: &IdentityDataset, root: &Path) -> Result<()> {
    for id in dataset.identities() {
        let dir = root.join(&id.label);
        fs::create_dir_all(&dir).map_err(|e| IvfgError::io(&dir, e))?;
        for (j, img) in id.images.iter().enumerate() {
            image_to_png(img, &dir.join(format!("{j:03}.png")))?;
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| IvfgError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| IvfgError::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Loads `<root>/<label>/*.png`, identities and files in lexicographic order.
pub fn load_dataset(root: &Path) -> Result<IdentityDataset> {
    if !root.is_dir() {
        return Err(IvfgError::MissingArtifact(root.to_path_buf()));
    }
    let mut identities = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| IvfgError::InvalidConfig(format!("non UTF-8 directory {}", dir.display())))?
            .to_string();
        let images = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .map(|p| read_png(&p))
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(IvfgError::InsufficientData(format!("{} contains no images", dir.display())));
        }
        identities.push(Identity { label, images });
    }
    if identities.is_empty() {
        return Err(IvfgError::EmptyInput("dataset root has no identity directories"));
    }
    IdentityDataset::new(identities)
}

/// Identity-disjoint train/validation/test partition.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: IdentityDataset,
    pub val: IdentityDataset,
    pub test: IdentityDataset,
}

/// Number of identities per split: validation and test round to nearest, the
/// training split absorbs the remainder.
pub fn split_counts(n: usize, ratios: [usize; 3]) -> Result<[usize; 3]> {
    let total: usize = ratios.iter().sum();
    if ratios.contains(&0) {
        return Err(IvfgError::InvalidConfig("split ratios must be positive".into()));
    }
    let share = |r: usize| (n as f64 * r as f64 / total as f64).round() as usize;
    let min_ratio = *ratios.iter().min().unwrap();
    if n * min_ratio < total {
        return Err(IvfgError::InsufficientData(format!(
            "{n} identities are too few for a {}:{}:{} split",
            ratios[0], ratios[1], ratios[2]
        )));
    }
    let (val, test) = (share(ratios[1]), share(ratios[2]));
    Ok([n - val - test, val, test])
}

/// Shuffles identities with `seed` and partitions them by `ratios`
/// (train:val:test). Each split keeps label order.
pub fn identity_split(dataset: &IdentityDataset, ratios: [usize; 3], seed: u64) -> Result<Split> {
    let [n_train, n_val, _] = split_counts(dataset.identity_count(), ratios)?;
    let mut order: Vec<usize> = (0..dataset.identity_count()).collect();
    order.shuffle(&mut seeded_rng(seed, 0x5917));
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        IdentityDataset::new(idx.iter().map(|&i| dataset.identities[i].clone()).collect())
    };
    Ok(Split {
        train: take(&order[..n_train])?,
        val: take(&order[n_train..n_train + n_val])?,
        test: take(&order[n_train + n_val..])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_spec(seed: u64) -> ToyDatasetSpec {
        ToyDatasetSpec {
            identity_count: 4,
            images_per_identity: 3,
            resolution: 16,
            seed,
            variation: 1.0,
        }
    }

    fn sq_dist(a: &ImageArray, b: &[f64]) -> f64 {
        a.data().iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(synth_toy_dataset(&small_spec(3)).unwrap(), synth_toy_dataset(&small_spec(3)).unwrap());
        assert_ne!(synth_toy_dataset(&small_spec(3)).unwrap(), synth_toy_dataset(&small_spec(4)).unwrap());
    }

    #[test]
    fn default_spec_shape() {
        let ds = synth_toy_dataset(&ToyDatasetSpec::default()).unwrap();
        assert_eq!(ds.identity_count(), 30);
        assert_eq!(ds.image_count(), 300);
        for (_, img) in ds.iter_images() {
            assert_eq!((img.height(), img.width(), img.channels()), (32, 32, 3));
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn default_spec_is_separable() {
        let ds = synth_toy_dataset(&ToyDatasetSpec::default()).unwrap();
        // Nearest centroid on raw pixels, centroids from the first half of each identity.
        let centroids: Vec<Vec<f64>> = ds
            .identities()
            .iter()
            .map(|id| {
                let half = &id.images[..id.images.len() / 2];
                let mut c = vec![0.0; half[0].data().len()];
                for img in half {
                    for (a, v) in c.iter_mut().zip(img.data()) {
                        *a += v / half.len() as f64;
                    }
                }
                c
            })
            .collect();
        let (mut correct, mut total) = (0, 0);
        for (label, id) in ds.identities().iter().enumerate() {
            for img in &id.images[id.images.len() / 2..] {
                let best = (0..centroids.len())
                    .min_by(|&a, &b| sq_dist(img, &centroids[a]).total_cmp(&sq_dist(img, &centroids[b])))
                    .unwrap();
                correct += usize::from(best == label);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");

        // Mean intra-identity pixel distance below mean inter-identity distance.
        let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0, 0.0, 0);
        let all: Vec<_> = ds.iter_images().collect();
        for (i, (la, a)) in all.iter().enumerate() {
            for (lb, b) in &all[i + 1..] {
                let d = sq_dist(a, b.data()).sqrt();
                if la == lb {
                    intra += d;
                    n_intra += 1;
                } else {
                    inter += d;
                    n_inter += 1;
                }
            }
        }
        assert!(intra / (n_intra as f64) < inter / (n_inter as f64));
    }

    #[test]
    fn disk_round_trip_is_exact_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_toy_dataset(&small_spec(1)).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(load_dataset(dir.path()).unwrap().labels(), loaded.labels());
    }

    #[test]
    fn two_dirs_two_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synth_toy_dataset(&small_spec(1)).unwrap();
        ds.identities.truncate(2);
        for id in &mut ds.identities {
            id.images.truncate(2);
        }
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!((loaded.identity_count(), loaded.image_count()), (2, 4));
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        let mixed = tempfile::tempdir().unwrap();
        for (label, size) in [("a", 8u32), ("b", 16)] {
            fs::create_dir(mixed.path().join(label)).unwrap();
            GrayImage::new(size, size).save(mixed.path().join(label).join("0.png")).unwrap();
        }
        assert!(matches!(load_dataset(mixed.path()), Err(IvfgError::InvalidImage(_))));
    }

    #[test]
    fn split_counts_follow_rounding_rule() {
        assert_eq!(split_counts(10, [8, 1, 1]).unwrap(), [8, 1, 1]);
        assert_eq!(split_counts(30, [8, 1, 1]).unwrap(), [24, 3, 3]);
        assert_eq!(split_counts(25, [8, 1, 1]).unwrap(), [19, 3, 3]);
        assert!(split_counts(9, [8, 1, 1]).is_err());
    }

    #[test]
    fn split_is_identity_disjoint_for_any_seed() {
        let spec = ToyDatasetSpec {
            identity_count: 12,
            images_per_identity: 2,
            resolution: 8,
            seed: 0,
            variation: 1.0,
        };
        let ds = synth_toy_dataset(&spec).unwrap();
        for seed in 0..20 {
            let s = identity_split(&ds, [8, 1, 1], seed).unwrap();
            let sets: Vec<BTreeSet<&str>> = [&s.train, &s.val, &s.test]
                .iter()
                .map(|d| d.labels().into_iter().collect())
                .collect();
            assert!(sets[0].is_disjoint(&sets[1]));
            assert!(sets[0].is_disjoint(&sets[2]));
            assert!(sets[1].is_disjoint(&sets[2]));
            assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), 12);
        }
    }
}
