//! Query-free model inversion against the transmitted head output.
//!
//! The adversary only ever sees its own bodies, the architecture descriptor,
//! auxiliary in-distribution data and the intercepted features. It trains a
//! shadow head and tail through the frozen bodies, fits a decoder from the
//! shadow head's features to images, and applies that decoder to what the
//! client actually sent.

mod decoder;
mod shadow;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use decoder::{decoder_graph, reconstruct, train_decoder, Decoder, DecoderConfig};
pub use shadow::{shadow_head_graph, train_shadow, AttackTarget, GateMode, ShadowConfig, ShadowNetwork, ShadowVariant};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// One attack per body.
    Single,
    /// One attack through every body behind a gate.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Single(usize),
    Adaptive,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Single(i) => write!(f, "single({i})"),
            Strategy::Adaptive => f.write_str("adaptive"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default)]
    pub shadow: ShadowConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// Run the per-body attacks on the worker pool.
    #[serde(default)]
    pub parallel: bool,
}

/// Training budget spent on one attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub aux_samples: usize,
    pub shadow_epochs: usize,
    pub decoder_epochs: usize,
    pub shadow_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub strategy: Strategy,
    pub reconstructions: Tensor,
    pub ssim: f64,
    pub psnr: f64,
    pub shadow_loss: f32,
    pub decoder_mse: f32,
    pub budget: AttackBudget,
    pub seed: u64,
}

/// One JSON-lines record per attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub strategy: String,
    pub ssim: f64,
    pub psnr: f64,
    pub shadow_loss: f32,
    pub decoder_mse: f32,
    pub budget: AttackBudget,
    pub seed: u64,
}

impl AttackResult {
    pub fn record(&self) -> AttackRecord {
        AttackRecord {
            strategy: self.strategy.to_string(),
            ssim: self.ssim,
            psnr: self.psnr,
            shadow_loss: self.shadow_loss,
            decoder_mse: self.decoder_mse,
            budget: self.budget,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackReport {
    pub singles: Vec<AttackResult>,
    pub adaptive: Option<AttackResult>,
}

impl AttackReport {
    /// The per-body result with the highest SSIM.
    pub fn best_ssim(&self) -> Option<&AttackResult> {
        self.singles.iter().max_by(|a, b| a.ssim.total_cmp(&b.ssim))
    }

    pub fn best_psnr(&self) -> Option<&AttackResult> {
        self.singles.iter().max_by(|a, b| a.psnr.total_cmp(&b.psnr))
    }

    pub fn all(&self) -> impl Iterator<Item = &AttackResult> {
        self.singles.iter().chain(self.adaptive.as_ref())
    }
}

/// Intercepted features and the images they came from (for scoring only).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub intercepted: Tensor,
    pub originals: Tensor,
}

impl EvalBatch {
    pub fn new(intercepted: Tensor, originals: Tensor) -> Result<Self> {
        if intercepted.batch() != originals.batch() {
            return Err(Error::InvalidArgument(format!(
                "{} feature maps for {} images",
                intercepted.batch(),
                originals.batch()
            )));
        }
        Ok(EvalBatch { intercepted, originals })
    }
}

/// Scores a decoder's reconstruction of the batch.
pub fn score(decoder: &Decoder, eval: &EvalBatch) -> Result<(Tensor, f64, f64)> {
    let rec = reconstruct(decoder, &eval.intercepted)?;
    let s = ssim(&rec, &eval.originals)?;
    let p = psnr(&rec, &eval.originals)?;
    Ok((rec, s, p))
}

fn one(target: &AttackTarget<'_>, aux: &LabeledDataset, eval: &EvalBatch, strategy: Strategy, cfg: &AttackConfig, seed: u64) -> Result<AttackResult> {
    let variant = match strategy {
        Strategy::Single(i) => ShadowVariant::Single(i),
        Strategy::Adaptive => ShadowVariant::Adaptive,
    };
    let shadow = train_shadow(target, aux, variant, &cfg.shadow, seed)?;
    let decoder = train_decoder(&shadow.shadow_head, aux, &cfg.decoder, seed)?;
    let (reconstructions, s, p) = score(&decoder, eval)?;
    log::debug!("attack {strategy}: ssim {s:.4} psnr {p:.2}");
    Ok(AttackResult {
        strategy,
        reconstructions,
        ssim: s,
        psnr: p,
        shadow_loss: shadow.epoch_losses.last().copied().unwrap_or(f32::NAN),
        decoder_mse: decoder.final_mse(),
        budget: AttackBudget {
            aux_samples: aux.len(),
            shadow_epochs: cfg.shadow.epochs,
            decoder_epochs: cfg.decoder.epochs,
            shadow_channels: cfg.shadow.channels,
        },
        seed,
    })
}

/// Runs every requested strategy. `Single` expands to one attack per body.
pub fn run_attack(
    target: &AttackTarget<'_>,
    aux: &LabeledDataset,
    eval: &EvalBatch,
    strategies: &[StrategyKind],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackReport> {
    let mut report = AttackReport::default();
    if strategies.contains(&StrategyKind::Single) {
        let idx: Vec<usize> = (0..target.bodies.len()).collect();
        let run = |&i: &usize| one(target, aux, eval, Strategy::Single(i), cfg, seed);
        report.singles = if cfg.parallel {
            idx.par_iter().map(run).collect::<Result<_>>()?
        } else {
            idx.iter().map(run).collect::<Result<_>>()?
        };
    }
    if strategies.contains(&StrategyKind::Adaptive) {
        report.adaptive = Some(one(target, aux, eval, Strategy::Adaptive, cfg, seed)?);
    }
    Ok(report)
}
