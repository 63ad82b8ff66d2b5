//! Training loops for split pipelines with a perturbed head output.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::defense::noise::DropoutSpec;
use crate::defense::selector::{batch_cosine, SelectorKey};
use crate::error::{Error, Result};
use crate::nn::layer::Mode;
use crate::nn::train::{cross_entropy, run_epochs};
use crate::nn::{GraphCache, ModelGraph, ModelPartition, Sgd, SgdConfig};
use crate::rng;
use crate::tensor::Tensor;

/// Epoch budget and optimizer for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    #[serde(default)]
    pub optim: SgdConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 10,
            optim: SgdConfig::default(),
        }
    }
}

/// Which Stage-1 heads the similarity penalty takes its maximum over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerScope {
    #[default]
    Selected,
    All,
}

/// How the selected bodies feed the tail during Stage 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// One cross-entropy term per selected body; that body's slot of the
    /// tail input is filled and every other slot is zero.
    #[default]
    PerPath,
    /// A single cross-entropy on the full selector output.
    Joint,
}

/// Perturbation applied to the head output during training.
#[derive(Debug, Clone)]
pub(crate) enum Inject {
    Nothing,
    Noise(Tensor),
    Dropout(DropoutSpec),
}

impl Inject {
    /// Returns the perturbed features and, for dropout, the mask used.
    fn apply(&self, z: &Tensor, step: u64) -> Result<(Tensor, Option<Tensor>)> {
        match self {
            Inject::Nothing => Ok((z.clone(), None)),
            Inject::Noise(n) => Ok((z.add_broadcast(n)?, None)),
            Inject::Dropout(d) => {
                let m = d.mask(z.shape(), step);
                Ok((z.zip_with(&m, |a, b| a * b)?, Some(m)))
            }
        }
    }
}

fn through_mask(grad: Tensor, mask: &Option<Tensor>) -> Result<Tensor> {
    match mask {
        Some(m) => grad.zip_with(m, |g, k| g * k),
        None => Ok(grad),
    }
}

/// Trains head, body and tail jointly with `inject` between head and body.
pub(crate) fn train_pipeline(
    part: &ModelPartition,
    data: &LabeledDataset,
    inject: &Inject,
    cfg: &StageConfig,
    shuffle_seed: u64,
) -> Result<(ModelPartition, Vec<f32>)> {
    let mut p = part.clone();
    let mut opt_h = Sgd::new(cfg.optim, &p.head);
    let mut opt_b = Sgd::new(cfg.optim, &p.body);
    let mut opt_t = Sgd::new(cfg.optim, &p.tail);
    let mut step = 0u64;
    let losses = run_epochs(data.len(), cfg.epochs, cfg.optim.batch_size, shuffle_seed, "train", |idx| {
        let x = data.batch_inputs(idx);
        let (z, hc) = p.head.forward_cached(&x, Mode::Train)?;
        let (zin, mask) = inject.apply(&z, step)?;
        step += 1;
        let (y, bc) = p.body.forward_cached(&zin, Mode::Train)?;
        let (out, tc) = p.tail.forward_cached(&y, Mode::Train)?;
        let (loss, g) = cross_entropy(&out, &data.batch_labels(idx));
        let (mut gh, mut gb, mut gt) = (p.head.zero_grads(), p.body.zero_grads(), p.tail.zero_grads());
        let dy = p.tail.backward(&tc, &g, Some(&mut gt));
        let dz = p.body.backward(&bc, &dy, Some(&mut gb));
        p.head.backward(&hc, &through_mask(dz, &mask)?, Some(&mut gh));
        opt_h.step(&mut p.head, &gh)?;
        opt_b.step(&mut p.body, &gb)?;
        opt_t.step(&mut p.tail, &gt)?;
        Ok(loss)
    })?;
    Ok((p, losses))
}

/// Everything an ensemble training run touches.
pub(crate) struct EnsembleParts<'a> {
    pub head: ModelGraph,
    pub bodies: Vec<ModelGraph>,
    pub tail: ModelGraph,
    pub key: &'a SelectorKey,
    /// Stage-1 heads the similarity penalty compares against.
    pub reference_heads: &'a [ModelGraph],
    pub scope: RegularizerScope,
    pub lambda: f32,
    pub routing: Routing,
    pub train_bodies: bool,
}

/// Per-term breakdown of the ensemble objective on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Cross-entropy of every routed path (one entry in joint routing).
    pub path_ce: Vec<f32>,
    /// Batch-mean cosine similarity against each reference head in scope.
    pub similarities: Vec<f32>,
    pub lambda: f32,
    pub total: f32,
}

impl Objective {
    pub fn max_similarity(&self) -> f32 {
        self.similarities.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

fn scope_indices(scope: RegularizerScope, key: &SelectorKey, available: usize) -> Vec<usize> {
    match scope {
        RegularizerScope::Selected => key.activated.clone(),
        RegularizerScope::All => (0..available).collect(),
    }
}

/// Tail input with the given slots filled by `S_k · y_k` and the rest zero.
fn tail_input(ys: &[Tensor], key: &SelectorKey, only: Option<usize>) -> Result<Tensor> {
    let scaled: Vec<Tensor> = ys
        .iter()
        .enumerate()
        .map(|(k, y)| match only {
            Some(o) if o != k => Tensor::zeros(y.shape()),
            _ => y.scale(key.weights[k]),
        })
        .collect();
    let refs: Vec<&Tensor> = scaled.iter().collect();
    Tensor::concat_channels(&refs)
}

struct Pass {
    objective: Objective,
    head_cache: GraphCache,
    /// Gradient at the head output.
    dz: Tensor,
    body_grads: Vec<Option<crate::nn::Gradients>>,
    tail_grads: crate::nn::Gradients,
}

impl EnsembleParts<'_> {
    fn check(&self) -> Result<()> {
        if self.key.n != self.bodies.len() {
            return Err(Error::InvalidSelector(format!(
                "key is for N = {}, but {} bodies were given",
                self.key.n,
                self.bodies.len()
            )));
        }
        if self.lambda != 0.0 {
            let need = scope_indices(self.scope, self.key, self.bodies.len());
            if need.iter().any(|&i| i >= self.reference_heads.len()) {
                return Err(Error::InvalidArgument(format!(
                    "regularizer needs {} reference heads, got {}",
                    self.bodies.len(),
                    self.reference_heads.len()
                )));
            }
        }
        Ok(())
    }

    fn pass(&self, x: &Tensor, labels: &[usize], inject: &Inject, step: u64, mode: Mode, want_grads: bool) -> Result<Pass> {
        let (z, head_cache) = self.head.forward_cached(x, mode)?;
        let (zin, mask) = inject.apply(&z, step)?;
        let body_mode = if self.train_bodies { mode } else { Mode::Eval };
        let mut ys = Vec::with_capacity(self.key.p());
        let mut body_caches = Vec::with_capacity(self.key.p());
        for &i in &self.key.activated {
            let (y, c) = self.bodies[i].forward_cached(&zin, body_mode)?;
            ys.push(y);
            body_caches.push(c);
        }
        let p = self.key.p();
        let mut tail_grads = self.tail.zero_grads();
        let mut dys: Vec<Tensor> = ys.iter().map(|y| Tensor::zeros(y.shape())).collect();
        let mut path_ce = Vec::new();
        let routes: Vec<Option<usize>> = match self.routing {
            Routing::PerPath => (0..p).map(Some).collect(),
            Routing::Joint => vec![None],
        };
        for only in routes {
            let input = tail_input(&ys, self.key, only)?;
            let (out, tc) = self.tail.forward_cached(&input, mode)?;
            let (ce, g) = cross_entropy(&out, labels);
            path_ce.push(ce);
            if want_grads {
                let din = self.tail.backward(&tc, &g, Some(&mut tail_grads));
                for (k, part) in din.split_channels(p)?.into_iter().enumerate() {
                    if only.is_none_or(|o| o == k) {
                        dys[k].add_assign(&part.scale(self.key.weights[k]))?;
                    }
                }
            }
        }

        let mut similarities = Vec::new();
        let mut best: Option<(f32, Tensor)> = None;
        if self.lambda != 0.0 {
            for j in scope_indices(self.scope, self.key, self.bodies.len()) {
                let r = self.reference_heads[j].forward(x)?;
                let (cs, g) = batch_cosine(&z, &r)?;
                similarities.push(cs);
                if best.as_ref().is_none_or(|(b, _)| cs > *b) {
                    best = Some((cs, g));
                }
            }
        }
        let reg = best.as_ref().map_or(0.0, |(cs, _)| *cs);
        let total = path_ce.iter().sum::<f32>() + self.lambda * reg;

        let mut body_grads = Vec::new();
        let mut dz = Tensor::zeros(z.shape());
        if want_grads {
            let mut dzin = Tensor::zeros(zin.shape());
            for (k, &i) in self.key.activated.iter().enumerate() {
                let mut gs = self.train_bodies.then(|| self.bodies[i].zero_grads());
                let d = self.bodies[i].backward(&body_caches[k], &dys[k], gs.as_mut());
                dzin.add_assign(&d)?;
                body_grads.push(gs);
            }
            dz = through_mask(dzin, &mask)?;
            if let Some((_, g)) = best {
                dz.add_assign(&g.scale(self.lambda))?;
            }
        }
        Ok(Pass {
            objective: Objective {
                path_ce,
                similarities,
                lambda: self.lambda,
                total,
            },
            head_cache,
            dz,
            body_grads,
            tail_grads,
        })
    }

    /// Objective on one batch in evaluation mode.
    pub fn objective(&self, x: &Tensor, labels: &[usize], inject: &Inject) -> Result<Objective> {
        self.check()?;
        Ok(self.pass(x, labels, inject, 0, Mode::Eval, false)?.objective)
    }

    /// Trains head and tail (and the selected bodies when `train_bodies`).
    pub fn train(mut self, data: &LabeledDataset, inject: &Inject, cfg: &StageConfig, shuffle_seed: u64) -> Result<(Self, Vec<f32>)> {
        self.check()?;
        let mut opt_h = Sgd::new(cfg.optim, &self.head);
        let mut opt_t = Sgd::new(cfg.optim, &self.tail);
        let mut opt_b: Vec<Sgd> = self.bodies.iter().map(|b| Sgd::new(cfg.optim, b)).collect();
        let mut step = 0u64;
        let losses = run_epochs(data.len(), cfg.epochs, cfg.optim.batch_size, shuffle_seed, "ensemble", |idx| {
            let x = data.batch_inputs(idx);
            let pass = self.pass(&x, &data.batch_labels(idx), inject, step, Mode::Train, true)?;
            step += 1;
            let mut gh = self.head.zero_grads();
            self.head.backward(&pass.head_cache, &pass.dz, Some(&mut gh));
            opt_h.step(&mut self.head, &gh)?;
            opt_t.step(&mut self.tail, &pass.tail_grads)?;
            for (&i, gs) in self.key.activated.iter().zip(&pass.body_grads) {
                if let Some(gs) = gs {
                    opt_b[i].step(&mut self.bodies[i], gs)?;
                }
            }
            Ok(pass.objective.total)
        })?;
        Ok((self, losses))
    }
}

/// Seeds derived for the `index`-th member of a family.
pub(crate) fn member_seed(seed: u64, family: &str, index: usize, purpose: &str) -> u64 {
    rng::indexed_seed(seed, &format!("{family}/{purpose}"), index)
}
