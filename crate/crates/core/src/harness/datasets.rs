//! Dataset ingestion: two procedural generators and a CIFAR-10 binary reader.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DATASETS: &[&str] = &["synthetic-shapes", "synthetic-blobs", "cifar10-subset"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// Directory holding `data_batch_*.bin` (CIFAR-10 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Total samples before partitioning.
    pub samples: usize,
    /// `[C, H, W]`; ignored by the CIFAR reader, which is always 3×32×32.
    pub shape: Vec<usize>,
    pub classes: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Fractions of the data for client training and the attacker's aux set;
    /// the remainder is the evaluation set.
    pub train_fraction: f64,
    pub aux_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "synthetic-shapes".into(),
            root: None,
            samples: 1536,
            shape: vec![1, 8, 8],
            classes: 4,
            mean: vec![0.5],
            std: vec![0.5],
            train_fraction: 0.5,
            aux_fraction: 0.3,
        }
    }
}

/// Disjoint client-train, attacker-aux and evaluation partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Partitions {
    pub train: LabeledDataset,
    pub aux: LabeledDataset,
    pub eval: LabeledDataset,
}

fn normalization(spec: &DatasetSpec, channels: usize) -> Result<Normalization> {
    let expand = |v: &[f32], what: &str| -> Result<Vec<f32>> {
        match v.len() {
            1 => Ok(vec![v[0]; channels]),
            n if n == channels => Ok(v.to_vec()),
            n => Err(Error::Dataset(format!("{n} {what} values for {channels} channels"))),
        }
    };
    let norm = Normalization {
        mean: expand(&spec.mean, "mean")?,
        std: expand(&spec.std, "std")?,
    };
    if norm.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::Dataset("normalization std must be positive".into()));
    }
    Ok(norm)
}

/// Balanced labels `0, 1, …, k−1, 0, …` in seeded shuffled order.
fn balanced_labels(n: usize, classes: usize, r: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(r);
    labels
}

fn shape3(spec: &DatasetSpec) -> Result<[usize; 3]> {
    match spec.shape.as_slice() {
        &[c, h, w] if c > 0 && h >= 4 && w >= 4 => Ok([c, h, w]),
        s => Err(Error::Dataset(format!("synthetic images need [C, H>=4, W>=4], got {s:?}"))),
    }
}

const SHAPE_CLASSES: usize = 8;

/// Whether pixel `(y, x)` belongs to the class glyph centered at `(cy, cx)`
/// with half-size `r`.
fn glyph(class: usize, y: f32, x: f32, cy: f32, cx: f32, r: f32) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    let inside = dy.abs() <= r && dx.abs() <= r;
    let t = (r * 0.35).max(0.5);
    match class {
        0 => inside,
        1 => inside && (dy.abs() <= t || dx.abs() <= t),
        2 => inside && (dy.abs() - r * 0.6).abs() <= t,
        3 => inside && (dx.abs() - r * 0.6).abs() <= t,
        4 => inside && (dy - dx).abs() <= t * 1.2,
        5 => inside && (dy + dx).abs() <= t * 1.2,
        6 => {
            let d = (dy * dy + dx * dx).sqrt();
            (d - r * 0.8).abs() <= t
        }
        _ => inside && ((dy + r).floor() as i64 + (dx + r).floor() as i64) % 2 == 0,
    }
}

fn synthetic_shapes(spec: &DatasetSpec, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = shape3(spec)?;
    if spec.classes == 0 || spec.classes > SHAPE_CLASSES {
        return Err(Error::Dataset(format!("synthetic-shapes supports 1..={SHAPE_CLASSES} classes")));
    }
    let mut r = rng::stream(seed, "dataset/synthetic-shapes");
    let labels = balanced_labels(spec.samples, spec.classes, &mut r);
    let mut images = Tensor::zeros(&[spec.samples, c, h, w]);
    let base = h.min(w) as f32;
    for (i, &label) in labels.iter().enumerate() {
        let radius = base * r.random_range(0.25..0.4);
        let cy = r.random_range(radius..(h as f32 - radius).max(radius + 1e-3)) - 0.5;
        let cx = r.random_range(radius..(w as f32 - radius).max(radius + 1e-3)) - 0.5;
        let bg: f32 = r.random_range(0.0..0.25);
        let colors: Vec<f32> = (0..c).map(|_| r.random_range(0.55..1.0)).collect();
        let img = images.sample_mut(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let on = glyph(label, y as f32, x as f32, cy, cx, radius);
                    let jitter: f32 = r.random_range(-0.05..0.05);
                    let v = if on { colors[ch] } else { bg } + jitter;
                    img[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok((images, labels))
}

fn synthetic_blobs(spec: &DatasetSpec, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = shape3(spec)?;
    if spec.classes == 0 {
        return Err(Error::Dataset("synthetic-blobs needs at least one class".into()));
    }
    let mut r = rng::stream(seed, "dataset/synthetic-blobs");
    let labels = balanced_labels(spec.samples, spec.classes, &mut r);
    let mut images = Tensor::zeros(&[spec.samples, c, h, w]);
    let (hc, wc) = (h as f32 / 2.0 - 0.5, w as f32 / 2.0 - 0.5);
    let ring = h.min(w) as f32 * 0.28;
    let width = h.min(w) as f32 * 0.16;
    for (i, &label) in labels.iter().enumerate() {
        let angle = std::f32::consts::TAU * label as f32 / spec.classes as f32;
        let cy = hc + ring * angle.sin() + r.random_range(-0.4..0.4);
        let cx = wc + ring * angle.cos() + r.random_range(-0.4..0.4);
        let amp: f32 = r.random_range(0.7..1.0);
        let img = images.sample_mut(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    let v = amp * (-d2 / (2.0 * width * width)).exp() + r.random_range(0.0..0.05);
                    img[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok((images, labels))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads up to `samples` records from `data_batch_1.bin` … `data_batch_5.bin`.
pub fn read_cifar10(root: &Path, samples: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(samples * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(samples);
    for b in 1..=5 {
        if labels.len() >= samples {
            break;
        }
        let path = root.join(format!("data_batch_{b}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{} is {} bytes, not a whole number of {CIFAR_RECORD}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if labels.len() >= samples {
                break;
            }
            if rec[0] > 9 {
                return Err(Error::Dataset(format!("{} record {k}: label {} > 9", path.display(), rec[0])));
            }
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&v| f32::from(v) / 255.0));
        }
    }
    if labels.len() < samples {
        return Err(Error::Dataset(format!("only {} CIFAR-10 records available, {samples} requested", labels.len())));
    }
    Ok((Tensor::new(vec![samples, 3, 32, 32], data)?, labels))
}

/// Generates or reads the full dataset.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset> {
    let (images, labels, classes) = match spec.name.as_str() {
        "synthetic-shapes" => {
            let (i, l) = synthetic_shapes(spec, seed)?;
            (i, l, spec.classes)
        }
        "synthetic-blobs" => {
            let (i, l) = synthetic_blobs(spec, seed)?;
            (i, l, spec.classes)
        }
        "cifar10-subset" => {
            let root = spec
                .root
                .as_ref()
                .ok_or_else(|| Error::Dataset("cifar10-subset needs a root directory".into()))?;
            let (i, l) = read_cifar10(root, spec.samples)?;
            (i, l, 10)
        }
        other => return Err(Error::Dataset(format!("unknown dataset `{other}`"))),
    };
    let norm = normalization(spec, images.sample_shape()[0])?;
    LabeledDataset::new(images, labels, classes, norm)
}

/// Seeded split into disjoint train, aux and eval partitions.
pub fn partition(data: &LabeledDataset, spec: &DatasetSpec, seed: u64) -> Result<Partitions> {
    let n = data.len();
    let (ft, fa) = (spec.train_fraction, spec.aux_fraction);
    if !(ft > 0.0 && fa > 0.0 && ft + fa < 1.0) {
        return Err(Error::Dataset(format!("fractions train={ft}, aux={fa} leave no eval data")));
    }
    let n_train = (n as f64 * ft).round() as usize;
    let n_aux = (n as f64 * fa).round() as usize;
    if n_train == 0 || n_aux == 0 || n_train + n_aux >= n {
        return Err(Error::Dataset(format!("{n} samples are too few to partition")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "dataset/partition"));
    Ok(Partitions {
        train: data.subset(&order[..n_train]),
        aux: data.subset(&order[n_train..n_train + n_aux]),
        eval: data.subset(&order[n_train + n_aux..]),
    })
}

pub fn load_partitions(spec: &DatasetSpec, seed: u64) -> Result<Partitions> {
    partition(&load_dataset(spec, seed)?, spec, seed)
}
