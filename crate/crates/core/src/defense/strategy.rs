use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::defense::ensembler::{fresh_client, stage1_train, stage3_train, EnsembleModel, Stage3Config};
use crate::defense::noise::{DropoutSpec, NoiseSpec, DEFAULT_DROPOUT};
use crate::defense::selector::{choose_selector, selector_combine, SelectorKey};
use crate::defense::train::{train_pipeline, EnsembleParts, Inject, RegularizerScope, Routing, StageConfig};
use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::nn::layer::Mode;
use crate::nn::train::{cross_entropy, run_epochs};
use crate::nn::{build_model, split, ArchSpec, ModelGraph, ModelPartition, SplitPlan};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    SingleNoise,
    /// Additive noise trained for magnitude under an accuracy penalty. A
    /// simplified stand-in, not a reimplementation of any published method.
    TrainedNoise,
    DropoutSingle,
    DropoutEnsemble,
    Ensembler,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 6] = [
        DefenseKind::None,
        DefenseKind::SingleNoise,
        DefenseKind::TrainedNoise,
        DefenseKind::DropoutSingle,
        DefenseKind::DropoutEnsemble,
        DefenseKind::Ensembler,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::SingleNoise => "single_noise",
            DefenseKind::TrainedNoise => "trained_noise",
            DefenseKind::DropoutSingle => "dropout_single",
            DefenseKind::DropoutEnsemble => "dropout_ensemble",
            DefenseKind::Ensembler => "ensembler",
        }
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefenseKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown defense kind `{s}`")))
    }
}

/// Knobs for every defense kind; each kind reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseParams {
    pub n: usize,
    pub p: usize,
    pub sigma: f32,
    pub lambda: f32,
    pub scope: RegularizerScope,
    pub routing: Routing,
    /// Norm reward for the trained-noise baseline.
    pub mu: f32,
    pub noise_lr: f32,
    pub noise_epochs: usize,
    pub dropout: f32,
    /// Overrides the selector stream; derived from the defense seed otherwise.
    pub selector_seed: Option<u64>,
    /// Stage 1 and every single-network training run.
    pub train: StageConfig,
    pub stage3: StageConfig,
}

impl Default for DefenseParams {
    fn default() -> Self {
        DefenseParams {
            n: 4,
            p: 2,
            sigma: 0.1,
            lambda: 1.0,
            scope: RegularizerScope::Selected,
            routing: Routing::PerPath,
            mu: 0.1,
            noise_lr: 0.01,
            noise_epochs: 5,
            dropout: DEFAULT_DROPOUT,
            selector_seed: None,
            train: StageConfig::default(),
            stage3: StageConfig::default(),
        }
    }
}

impl DefenseParams {
    pub fn stage3_config(&self) -> Stage3Config {
        Stage3Config {
            lambda: self.lambda,
            scope: self.scope,
            routing: self.routing,
            train: self.stage3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    None,
    Noise(NoiseSpec),
    /// Active at inference as well, with a fresh mask per call.
    Dropout(DropoutSpec),
}

/// A deployed split pipeline under one defense.
#[derive(Debug)]
pub struct DefenseStrategy {
    pub kind: DefenseKind,
    pub head: ModelGraph,
    pub bodies: Vec<ModelGraph>,
    pub tail: ModelGraph,
    pub key: SelectorKey,
    pub perturbation: Perturbation,
    /// Stage-1 heads, for the ensembler only.
    pub stage1_heads: Vec<ModelGraph>,
    calls: AtomicU64,
}

impl Clone for DefenseStrategy {
    fn clone(&self) -> Self {
        DefenseStrategy {
            kind: self.kind,
            head: self.head.clone(),
            bodies: self.bodies.clone(),
            tail: self.tail.clone(),
            key: self.key.clone(),
            perturbation: self.perturbation.clone(),
            stage1_heads: self.stage1_heads.clone(),
            calls: AtomicU64::new(self.calls.load(Ordering::Relaxed)),
        }
    }
}

impl DefenseStrategy {
    fn new(kind: DefenseKind, head: ModelGraph, bodies: Vec<ModelGraph>, tail: ModelGraph, key: SelectorKey, perturbation: Perturbation) -> Self {
        DefenseStrategy {
            kind,
            head,
            bodies,
            tail,
            key,
            perturbation,
            stage1_heads: Vec::new(),
            calls: AtomicU64::new(0),
        }
    }

    /// Single-body pipeline with an optional perturbation.
    pub fn single(kind: DefenseKind, part: ModelPartition, perturbation: Perturbation) -> Self {
        let key = SelectorKey::uniform(1, vec![0]).expect("valid");
        Self::new(kind, part.head, vec![part.body], part.tail, key, perturbation)
    }

    pub fn undefended(part: ModelPartition) -> Self {
        Self::single(DefenseKind::None, part, Perturbation::None)
    }

    pub fn from_ensemble(model: EnsembleModel) -> Self {
        let mut s = Self::new(
            DefenseKind::Ensembler,
            model.head,
            model.bodies,
            model.tail,
            model.key,
            Perturbation::Noise(model.noise),
        );
        s.stage1_heads = model.stage1_heads;
        s
    }

    pub fn n(&self) -> usize {
        self.bodies.len()
    }

    /// Features the client sends to the server.
    pub fn client_forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.head.forward(x)?;
        match &self.perturbation {
            Perturbation::None => Ok(z),
            Perturbation::Noise(n) => n.apply(&z),
            Perturbation::Dropout(d) => {
                let m = d.mask(z.shape(), self.calls.fetch_add(1, Ordering::Relaxed) + (1 << 32));
                z.zip_with(&m, |a, b| a * b)
            }
        }
    }

    /// Every body's output, ascending index order.
    pub fn server_forward(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        self.bodies.iter().map(|b| b.forward(z)).collect()
    }

    pub fn server_forward_parallel(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        self.bodies.par_iter().map(|b| b.forward(z)).collect()
    }

    pub fn client_finish(&self, outputs: &[Tensor]) -> Result<Tensor> {
        self.tail.forward(&selector_combine(outputs, &self.key)?)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.client_forward(x)?;
        self.client_finish(&self.server_forward(&z)?)
    }

    /// The additive noise tensor, if any.
    pub fn noise(&self) -> Option<&NoiseSpec> {
        match &self.perturbation {
            Perturbation::Noise(n) => Some(n),
            _ => None,
        }
    }

    /// Restarts the dropout mask sequence.
    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl Classifier for DefenseStrategy {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x)
    }
}

fn seed_for(seed: u64, kind: DefenseKind, purpose: &str) -> u64 {
    rng::derive_seed(seed, &format!("{kind}/{purpose}"))
}

/// Trains the plain undefended pipeline.
pub fn train_undefended(spec: &ArchSpec, plan: SplitPlan, data: &LabeledDataset, cfg: &StageConfig, seed: u64) -> Result<ModelPartition> {
    let k = DefenseKind::None;
    let part = split(&build_model(spec, seed_for(seed, k, "init"))?, plan)?;
    Ok(train_pipeline(&part, data, &Inject::Nothing, cfg, seed_for(seed, k, "shuffle"))?.0)
}

/// Trains `noise` against a frozen pipeline, minimizing `CE − μ‖noise‖`.
pub fn train_noise(part: &ModelPartition, init: NoiseSpec, data: &LabeledDataset, mu: f32, lr: f32, epochs: usize, batch: usize, seed: u64) -> Result<NoiseSpec> {
    let mut noise = init;
    run_epochs(data.len(), epochs, batch, seed, "trained_noise", |idx| {
        let x = data.batch_inputs(idx);
        let z = part.head.forward(&x)?.add_broadcast(&noise.tensor)?;
        let (y, bc) = part.body.forward_cached(&z, Mode::Eval)?;
        let (out, tc) = part.tail.forward_cached(&y, Mode::Eval)?;
        let (ce, g) = cross_entropy(&out, &data.batch_labels(idx));
        let dz = part.body.backward(&bc, &part.tail.backward(&tc, &g, None), None);
        let norm = noise.norm();
        let per = dz.sample_len();
        let t = noise.tensor.data_mut();
        for (j, v) in t.iter_mut().enumerate() {
            let grad_ce: f32 = (0..dz.batch()).map(|b| dz.data()[b * per + j]).sum();
            let grad_norm = if norm > 0.0 { *v / norm } else { 0.0 };
            *v -= lr * (grad_ce - mu * grad_norm);
        }
        Ok(ce - mu * norm)
    })?;
    Ok(noise)
}

/// Builds and trains a defense of the given kind.
pub fn baseline_defense(kind: DefenseKind, params: &DefenseParams, spec: &ArchSpec, plan: SplitPlan, data: &LabeledDataset, seed: u64) -> Result<DefenseStrategy> {
    let cfg = &params.train;
    match kind {
        DefenseKind::None => Ok(DefenseStrategy::undefended(train_undefended(spec, plan, data, cfg, seed)?)),
        DefenseKind::SingleNoise => {
            let (models, noises) = stage1_train(spec, plan, data, 1, params.sigma, cfg, seed)?;
            let part = split(&models[0], plan)?;
            Ok(DefenseStrategy::single(kind, part, Perturbation::Noise(noises[0].clone())))
        }
        DefenseKind::TrainedNoise => {
            let part = train_undefended(spec, plan, data, cfg, seed_for(seed, kind, "base"))?;
            let init = NoiseSpec::sample(params.sigma, seed_for(seed, kind, "noise"), part.head.output_shape())?;
            let noise = train_noise(
                &part,
                init,
                data,
                params.mu,
                params.noise_lr,
                params.noise_epochs,
                cfg.optim.batch_size,
                seed_for(seed, kind, "shuffle"),
            )?;
            Ok(DefenseStrategy::single(kind, part, Perturbation::Noise(noise)))
        }
        DefenseKind::DropoutSingle => {
            let part = split(&build_model(spec, seed_for(seed, kind, "init"))?, plan)?;
            let drop = DropoutSpec::new(params.dropout, seed_for(seed, kind, "mask"))?;
            let (part, _) = train_pipeline(&part, data, &Inject::Dropout(drop), cfg, seed_for(seed, kind, "shuffle"))?;
            Ok(DefenseStrategy::single(kind, part, Perturbation::Dropout(drop)))
        }
        DefenseKind::DropoutEnsemble => {
            let key = choose_selector(params.n, params.p, params.selector_seed.unwrap_or(seed_for(seed, kind, "selector")))?;
            let (head, tail) = fresh_client(spec, plan, key.p(), seed_for(seed, kind, "init"))?;
            let bodies: Vec<ModelGraph> = (0..params.n)
                .map(|i| Ok(split(&build_model(spec, rng::indexed_seed(seed, "dropout_ensemble/body", i))?, plan)?.body))
                .collect::<Result<_>>()?;
            let drop = DropoutSpec::new(params.dropout, seed_for(seed, kind, "mask"))?;
            let (t, _) = EnsembleParts {
                head,
                bodies,
                tail,
                key: &key,
                reference_heads: &[],
                scope: RegularizerScope::Selected,
                lambda: 0.0,
                routing: Routing::Joint,
                train_bodies: true,
            }
            .train(data, &Inject::Dropout(drop), cfg, seed_for(seed, kind, "shuffle"))?;
            Ok(DefenseStrategy::new(kind, t.head, t.bodies, t.tail, key, Perturbation::Dropout(drop)))
        }
        DefenseKind::Ensembler => Ok(DefenseStrategy::from_ensemble(train_ensembler(params, spec, plan, data, seed)?.0)),
    }
}

/// Stage-1 models and noises together with the retrained ensemble.
pub struct EnsemblerRun {
    pub stage1: Vec<ModelGraph>,
    pub stage1_noise: Vec<NoiseSpec>,
    pub stage3_losses: Vec<f32>,
}

/// All three stages. Stage-1 net 0 with its noise is the matching Single baseline.
pub fn train_ensembler(params: &DefenseParams, spec: &ArchSpec, plan: SplitPlan, data: &LabeledDataset, seed: u64) -> Result<(EnsembleModel, EnsemblerRun)> {
    let (stage1, noises) = stage1_train(spec, plan, data, params.n, params.sigma, &params.train, seed)?;
    let key = choose_selector(
        params.n,
        params.p,
        params.selector_seed.unwrap_or(seed_for(seed, DefenseKind::Ensembler, "selector")),
    )?;
    let (model, losses) = stage3_train(spec, plan, &stage1, &key, data, params.sigma, &params.stage3_config(), seed)?;
    Ok((
        model,
        EnsemblerRun {
            stage1,
            stage1_noise: noises,
            stage3_losses: losses,
        },
    ))
}
