//! Losses, SGD with momentum, and the seeded mini-batch epoch driver.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::graph::{Gradients, ModelGraph};
use crate::nn::layer::{Mode, ParamKind};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Softmax cross-entropy on logits.
    CrossEntropy,
    /// Mean squared error against one-hot targets.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            weight_decay: 0.0,
        }
    }
}

/// Exponential-average factor for batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.1;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor) {
    let batch = logits.batch();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for b in 0..batch {
        let row = logits.sample(b);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += f64::from(log_z - row[labels[b]]);
        let g = grad.sample_mut(b);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - log_z).exp() / batch as f32;
        }
        g[labels[b]] -= 1.0 / batch as f32;
    }
    ((total / batch as f64) as f32, grad)
}

/// Per-sample cross-entropy values (no gradient).
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Vec<f32> {
    (0..logits.batch())
        .map(|b| {
            let row = logits.sample(b);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
            max + sum.ln() - row[labels[b]]
        })
        .collect()
}

/// Mean squared error averaged over every element, with gradient w.r.t. `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    let diff = pred.sub(target)?;
    let n = diff.len().max(1) as f32;
    let loss = diff.data().iter().map(|d| f64::from(d * d)).sum::<f64>() / f64::from(n);
    Ok((loss as f32, diff.scale(2.0 / n)))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (b, &l) in labels.iter().enumerate() {
        t.sample_mut(b)[l] = 1.0;
    }
    t
}

/// Momentum state for one graph.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, graph: &ModelGraph) -> Self {
        Sgd {
            cfg,
            velocity: graph
                .params()
                .into_iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Applies one update. Buffer slots that carry an observed statistic are
    /// folded into the running average.
    pub fn step(&mut self, graph: &mut ModelGraph, grads: &Gradients) -> Result<()> {
        let cfg = self.cfg;
        for ((param, grad), vel) in graph
            .params_mut()
            .into_iter()
            .zip(&grads.slots)
            .zip(&mut self.velocity)
        {
            match param.kind {
                ParamKind::Weight => {
                    let w = param.value.data_mut();
                    for ((wv, &g), v) in w.iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                        let g = g + cfg.weight_decay * *wv;
                        *v = cfg.momentum * *v + g;
                        *wv -= cfg.lr * *v;
                    }
                    if !param.value.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            stage: format!("optimizer step on `{}`", param.name),
                            epoch: 0,
                            batch: 0,
                            value: f32::NAN,
                        });
                    }
                }
                ParamKind::Buffer => {
                    if grad.len() == param.value.len() {
                        for (r, &s) in param.value.data_mut().iter_mut().zip(grad.data()) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs `epochs` passes over `n` samples in seeded shuffled mini-batches.
/// `step` receives the batch indices and returns the batch loss. Returns the
/// mean batch loss of each epoch.
pub fn run_epochs<F>(n: usize, epochs: usize, batch_size: usize, seed: u64, stage: &str, mut step: F) -> Result<Vec<f32>>
where
    F: FnMut(&[usize]) -> Result<f32>,
{
    if n == 0 {
        return Err(Error::Dataset(format!("{stage}: empty training set")));
    }
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = rng::stream(seed, &format!("shuffle/{stage}"));
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (bi, batch) in order.chunks(batch_size).enumerate() {
            let loss = step(batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: stage.to_string(),
                    epoch,
                    batch: bi,
                    value: loss,
                });
            }
            total += f64::from(loss);
            count += 1;
        }
        losses.push((total / count as f64) as f32);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-dataset loss before the first update.
    pub initial_loss: f32,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f32>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f32 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

fn batch_loss(loss: Loss, out: &Tensor, labels: &[usize], classes: usize) -> Result<(f32, Tensor)> {
    match loss {
        Loss::CrossEntropy => Ok(cross_entropy(out, labels)),
        Loss::Mse => mse(out, &one_hot(labels, classes)),
    }
}

/// Full-dataset loss in evaluation mode.
pub fn evaluate_loss(model: &ModelGraph, data: &LabeledDataset, loss: Loss) -> Result<f32> {
    let mut total = 0.0f64;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let out = model.forward(&data.batch_inputs(chunk))?;
        let (l, _) = batch_loss(loss, &out, &data.batch_labels(chunk), data.classes())?;
        total += f64::from(l) * chunk.len() as f64;
    }
    Ok((total / data.len().max(1) as f64) as f32)
}

/// Trains a copy of `model` on `data` and returns it with the loss history.
pub fn train_epochs(
    model: &ModelGraph,
    data: &LabeledDataset,
    loss: Loss,
    optim: &SgdConfig,
    epochs: usize,
    seed: u64,
) -> Result<(ModelGraph, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if model.ends_with_softmax() || model.output_shape() != [data.classes()] {
        return Err(Error::InvalidArgument(format!(
            "loss needs raw logits over {} classes; model outputs {:?}{}",
            data.classes(),
            model.output_shape(),
            if model.ends_with_softmax() { " after softmax" } else { "" }
        )));
    }
    let mut trained = model.clone();
    let initial_loss = evaluate_loss(model, data, loss)?;
    let mut opt = Sgd::new(*optim, &trained);
    let epoch_losses = run_epochs(data.len(), epochs, optim.batch_size, seed, "train", |idx| {
        let x = data.batch_inputs(idx);
        let (out, cache) = trained.forward_cached(&x, Mode::Train)?;
        let (l, g) = batch_loss(loss, &out, &data.batch_labels(idx), data.classes())?;
        let mut grads = trained.zero_grads();
        trained.backward(&cache, &g, Some(&mut grads));
        opt.step(&mut trained, &grads)?;
        Ok(l)
    })?;
    Ok((
        trained,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (l, g) = cross_entropy(&logits, &[0, 3]);
        assert!((l - 4f32.ln()).abs() < 1e-6);
        // Each row of the gradient sums to zero.
        for b in 0..2 {
            assert!(g.sample(b).iter().sum::<f32>().abs() < 1e-7);
        }
    }

    #[test]
    fn mse_gradient() {
        let p = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let t = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let (l, g) = mse(&p, &t).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.data(), &[1.0, 2.0]);
    }

    #[test]
    fn epochs_cover_every_sample() {
        let mut seen = vec![0usize; 10];
        run_epochs(10, 3, 4, 1, "t", |idx| {
            idx.iter().for_each(|&i| seen[i] += 1);
            Ok(0.0)
        })
        .unwrap();
        assert!(seen.iter().all(|&c| c == 3));
    }

    #[test]
    fn nan_loss_aborts() {
        let err = run_epochs(4, 1, 2, 1, "t", |_| Ok(f32::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0, .. }));
    }
}
