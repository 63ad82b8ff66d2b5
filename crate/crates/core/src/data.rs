use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel affine normalization applied to `[0, 1]` images before they
/// enter a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn apply(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let c = x.sample_shape().first().copied().unwrap_or(0);
        if c != self.mean.len() || c != self.std.len() {
            return Err(Error::Dataset(format!(
                "normalization has {} channels, images have {c}",
                self.mean.len()
            )));
        }
        let plane = x.sample_len() / c.max(1);
        let mut out = x.clone();
        for b in 0..x.batch() {
            let s = out.sample_mut(b);
            for ch in 0..c {
                let (m, sd) = (self.mean[ch], self.std[ch]);
                for v in &mut s[ch * plane..(ch + 1) * plane] {
                    *v = if inverse { *v * sd + m } else { (*v - m) / sd };
                }
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, unit: &Tensor) -> Result<Tensor> {
        self.apply(unit, false)
    }

    pub fn denormalize(&self, net: &Tensor) -> Result<Tensor> {
        self.apply(net, true)
    }
}

/// Labeled images kept in both `[0, 1]` pixel space and network space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    norm: Normalization,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, norm: Normalization) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Dataset(format!("expected NCHW images, got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside {classes} classes")));
        }
        let inputs = norm.normalize(&images)?;
        Ok(LabeledDataset {
            images,
            inputs,
            labels,
            classes,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images.sample_shape()
    }

    /// Pixel-space images in `[0, 1]`.
    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Normalized network inputs.
    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(indices),
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            norm: self.norm.clone(),
        }
    }

    pub fn batch_inputs(&self, indices: &[usize]) -> Tensor {
        self.inputs.select(indices)
    }

    pub fn batch_images(&self, indices: &[usize]) -> Tensor {
        self.images.select(indices)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}
