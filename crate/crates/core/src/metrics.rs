//! Reconstruction quality (SSIM, PSNR) and task accuracy.
//!
//! Images are `[0, 1]` NCHW batches with peak value 1. SSIM uses a 7×7
//! Gaussian window (σ = 1.5) over valid positions, `C1 = (0.01)²`,
//! `C2 = (0.03)²`, averaged over positions, channels and then images. PSNR is
//! `10·log10(1 / mean MSE)` over the batch, capped at [`PSNR_CAP`].

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{ModelGraph, ModelPartition};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const PEAK: f64 = 1.0;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in &g {
        for x in &g {
            w.push(y * x);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, window: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let k = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let wt = window[dy * k + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    let (va, vb) = (f64::from(a[i]), f64::from(b[i]));
                    ma += wt * va;
                    mb += wt * vb;
                    saa += wt * va * va;
                    sbb += wt * vb * vb;
                    sab += wt * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Per-image SSIM values.
pub fn ssim_per_image(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let &[_, c, h, w] = a.shape() else {
        return Err(Error::InvalidArgument(format!("SSIM needs NCHW images, got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"
        )));
    }
    let window = gaussian_window();
    let plane = h * w;
    Ok((0..a.batch())
        .map(|i| {
            let (sa, sb) = (a.sample(i), b.sample(i));
            (0..c)
                .map(|ch| ssim_plane(&sa[ch * plane..(ch + 1) * plane], &sb[ch * plane..(ch + 1) * plane], h, w, &window))
                .sum::<f64>()
                / c as f64
        })
        .collect())
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let per = ssim_per_image(a, b)?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Anything that maps a batch of network inputs to class logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for ModelGraph {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

impl Classifier for ModelPartition {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

/// Top-1 accuracy over `data`.
pub fn accuracy(model: &dyn Classifier, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("accuracy on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let pred = model.logits(&data.batch_inputs(chunk))?.argmax_rows();
        correct += pred
            .iter()
            .zip(data.batch_labels(chunk))
            .filter(|(p, l)| **p == *l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// `accuracy(defended) − accuracy(baseline)`.
pub fn delta_acc(defended: &dyn Classifier, baseline: &dyn Classifier, data: &LabeledDataset) -> Result<f64> {
    Ok(accuracy(defended, data)? - accuracy(baseline, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr: f64,
    pub acc_defended: f64,
    pub acc_baseline: f64,
    pub delta_acc: f64,
}

impl MetricReport {
    pub fn new(ssim: f64, psnr: f64, acc_defended: f64, acc_baseline: f64) -> Self {
        MetricReport {
            ssim,
            psnr,
            acc_defended,
            acc_baseline,
            delta_acc: acc_defended - acc_baseline,
        }
    }
}

/// Published single-noise reference point on CIFAR-10 (documentation only,
/// not reproduced at desk scale): ΔAcc, SSIM, PSNR.
pub const REFERENCE_SINGLE_CIFAR10: (f64, f64, f64) = (0.0215, 0.39, 7.53);
