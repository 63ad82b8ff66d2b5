use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::defense::noise::NoiseSpec;
use crate::defense::selector::{selector_combine, SelectorKey};
use crate::defense::train::{
    member_seed, train_pipeline, EnsembleParts, Inject, Objective, RegularizerScope, Routing, StageConfig,
};
use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::nn::{build_model, split, widen_input, ArchSpec, ModelGraph, ModelPartition, SplitPlan};
use crate::rng;
use crate::tensor::Tensor;

/// Seeds used for the `i`-th Stage-1 net: `(init, noise, shuffle)`.
pub fn stage1_seeds(seed: u64, i: usize) -> (u64, u64, u64) {
    (
        member_seed(seed, "stage1", i, "init"),
        member_seed(seed, "stage1", i, "noise"),
        member_seed(seed, "stage1", i, "shuffle"),
    )
}

/// Trains `n` full models, each with its own fixed noise after the head.
#[allow(clippy::too_many_arguments)]
pub fn stage1_train(
    spec: &ArchSpec,
    plan: SplitPlan,
    data: &LabeledDataset,
    n: usize,
    sigma: f32,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(Vec<ModelGraph>, Vec<NoiseSpec>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("stage 1 needs at least one net".into()));
    }
    let results: Vec<Result<(ModelGraph, NoiseSpec)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (init, noise_seed, shuffle) = stage1_seeds(seed, i);
            let model = build_model(spec, init)?;
            let part = split(&model, plan)?;
            let noise = NoiseSpec::sample(sigma, noise_seed, part.head.output_shape())?;
            let (trained, _) = train_pipeline(&part, data, &Inject::Noise(noise.tensor.clone()), cfg, shuffle)?;
            log::debug!("stage 1 net {i} trained");
            Ok((trained.join()?, noise))
        })
        .collect();
    let mut models = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    for r in results {
        let (m, z) = r?;
        models.push(m);
        noises.push(z);
    }
    Ok((models, noises))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    pub lambda: f32,
    #[serde(default)]
    pub scope: RegularizerScope,
    #[serde(default)]
    pub routing: Routing,
    #[serde(default)]
    pub train: StageConfig,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            lambda: 1.0,
            scope: RegularizerScope::Selected,
            routing: Routing::PerPath,
            train: StageConfig::default(),
        }
    }
}

/// One client head and tail, `N` server bodies, the fixed noise and the key.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub head: ModelGraph,
    pub bodies: Vec<ModelGraph>,
    pub tail: ModelGraph,
    pub noise: NoiseSpec,
    pub key: SelectorKey,
    pub stage1_heads: Vec<ModelGraph>,
}

impl EnsembleModel {
    /// What the client transmits: `head(x) + noise`.
    pub fn client_features(&self, x: &Tensor) -> Result<Tensor> {
        self.noise.apply(&self.head.forward(x)?)
    }

    pub fn server_outputs(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        self.bodies.iter().map(|b| b.forward(z)).collect()
    }

    pub fn server_outputs_parallel(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        self.bodies.par_iter().map(|b| b.forward(z)).collect()
    }

    pub fn client_finish(&self, outputs: &[Tensor]) -> Result<Tensor> {
        self.tail.forward(&selector_combine(outputs, &self.key)?)
    }

    /// Stage-3 objective on one batch (evaluation mode, fixed noise).
    pub fn objective(&self, x: &Tensor, labels: &[usize], cfg: &Stage3Config) -> Result<Objective> {
        EnsembleParts {
            head: self.head.clone(),
            bodies: self.bodies.clone(),
            tail: self.tail.clone(),
            key: &self.key,
            reference_heads: &self.stage1_heads,
            scope: cfg.scope,
            lambda: cfg.lambda,
            routing: cfg.routing,
            train_bodies: false,
        }
        .objective(x, labels, &Inject::Noise(self.noise.tensor.clone()))
    }
}

/// `tail(Sel[body_i(head(x) + noise)])`, evaluating every body.
pub fn ensembler_infer(model: &EnsembleModel, x: &Tensor) -> Result<Tensor> {
    let z = model.client_features(x)?;
    model.client_finish(&model.server_outputs(&z)?)
}

impl Classifier for EnsembleModel {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        ensembler_infer(self, x)
    }
}

/// Fresh head plus a tail widened to `P` selected body outputs.
pub(crate) fn fresh_client(spec: &ArchSpec, plan: SplitPlan, p: usize, seed: u64) -> Result<(ModelGraph, ModelGraph)> {
    let ModelPartition { head, tail, .. } = split(&build_model(spec, seed)?, plan)?;
    if tail.is_identity() && p > 1 {
        return Err(Error::InvalidArgument(
            "an ensemble with P > 1 needs a client tail (tail depth >= 1)".into(),
        ));
    }
    let tail = if tail.is_identity() { tail } else { widen_input(&tail, p, seed)? };
    Ok((head, tail))
}

/// Retrains a fresh client head and tail against the frozen Stage-1 bodies.
#[allow(clippy::too_many_arguments)]
pub fn stage3_train(
    spec: &ArchSpec,
    plan: SplitPlan,
    stage1: &[ModelGraph],
    key: &SelectorKey,
    data: &LabeledDataset,
    sigma: f32,
    cfg: &Stage3Config,
    seed: u64,
) -> Result<(EnsembleModel, Vec<f32>)> {
    if key.n != stage1.len() {
        return Err(Error::InvalidSelector(format!(
            "key is for N = {}, but {} stage-1 models were given",
            key.n,
            stage1.len()
        )));
    }
    let parts: Vec<ModelPartition> = stage1.iter().map(|m| split(m, plan)).collect::<Result<_>>()?;
    let (head, tail) = fresh_client(spec, plan, key.p(), rng::derive_seed(seed, "stage3/init"))?;
    let noise = NoiseSpec::sample(sigma, rng::derive_seed(seed, "stage3/noise"), head.output_shape())?;
    let stage1_heads: Vec<ModelGraph> = parts.iter().map(|p| p.head.clone()).collect();
    let bodies: Vec<ModelGraph> = parts.into_iter().map(|p| p.body).collect();
    let (trained, losses) = EnsembleParts {
        head,
        bodies,
        tail,
        key,
        reference_heads: &stage1_heads,
        scope: cfg.scope,
        lambda: cfg.lambda,
        routing: cfg.routing,
        train_bodies: false,
    }
    .train(
        data,
        &Inject::Noise(noise.tensor.clone()),
        &cfg.train,
        rng::derive_seed(seed, "stage3/shuffle"),
    )?;
    Ok((
        EnsembleModel {
            head: trained.head,
            bodies: trained.bodies,
            tail: trained.tail,
            noise,
            key: key.clone(),
            stage1_heads,
        },
        losses,
    ))
}
