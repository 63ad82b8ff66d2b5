use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::layer::{Conv2d, Layer, Mode};
use crate::nn::train::{cross_entropy, run_epochs};
use crate::nn::{build_model, split, widen_input, ArchSpec, ModelGraph, Sgd, SgdConfig, SplitPlan, SplitUnit};
use crate::rng;
use crate::tensor::Tensor;

/// What an adversarial server knows: its own bodies and the architecture.
#[derive(Debug, Clone, Copy)]
pub struct AttackTarget<'a> {
    pub bodies: &'a [ModelGraph],
    pub arch: &'a ArchSpec,
    pub plan: SplitPlan,
}

impl<'a> AttackTarget<'a> {
    pub fn new(bodies: &'a [ModelGraph], arch: &'a ArchSpec, plan: SplitPlan) -> Result<Self> {
        let first = bodies
            .first()
            .ok_or_else(|| Error::InvalidArgument("attack needs at least one body".into()))?;
        if let Some(b) = bodies.iter().find(|b| b.input_shape() != first.input_shape()) {
            return Err(Error::shape(first.input_shape(), b.input_shape()));
        }
        Ok(AttackTarget { bodies, arch, plan })
    }

    /// Shape of one transmitted feature map.
    pub fn feature_shape(&self) -> &[usize] {
        self.bodies[0].input_shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowVariant {
    Single(usize),
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Gate logits are trained with the shadow network.
    #[default]
    Joint,
    /// Gate fixed at `1/N`.
    Uniform,
}

/// The adversary's stand-in for the private head and tail.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowNetwork {
    pub shadow_head: ModelGraph,
    pub shadow_tail: ModelGraph,
    pub target_bodies: Vec<usize>,
    /// Normalized per-body weights (adaptive variant only).
    pub gate: Option<Vec<f32>>,
    pub epoch_losses: Vec<f32>,
}

fn log2_exact(f: usize) -> Option<usize> {
    (f.is_power_of_two()).then(|| f.trailing_zeros() as usize)
}

/// Three 3×3 conv units; the first `log2(downsampling)` of them use stride 2.
pub fn shadow_head_graph(image: &[usize], feature: &[usize], channels: usize, seed: u64) -> Result<ModelGraph> {
    let (&[ci, hi, wi], &[cf, hf, wf]) = (image, feature) else {
        return Err(Error::InvalidArgument(format!(
            "shadow head needs CHW image and feature shapes, got {image:?} and {feature:?}"
        )));
    };
    let bad = || Error::InvalidArgument(format!("cannot map {image:?} to {feature:?} with three stride-1/2 convolutions"));
    if hf == 0 || wf == 0 || hi % hf != 0 || wi % wf != 0 || hi / hf != wi / wf {
        return Err(bad());
    }
    let downs = log2_exact(hi / hf).filter(|&d| d <= 3).ok_or_else(bad)?;
    let widths = [channels, channels, cf];
    let mut cin = ci;
    let mut units = Vec::new();
    for (k, &cout) in widths.iter().enumerate() {
        let stride = if k < downs { 2 } else { 1 };
        let mut layers = vec![Layer::Conv2d(Conv2d::new(&format!("shadow{k}"), cin, cout, 3, stride, 1, true, seed))];
        if k < 2 {
            layers.push(Layer::Relu);
        }
        units.push(SplitUnit::new(format!("shadow{k}"), layers));
        cin = cout;
    }
    let g = ModelGraph::new("shadow/head", image.to_vec(), units)?;
    if g.output_shape() != feature {
        return Err(bad());
    }
    Ok(g)
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowConfig {
    pub channels: usize,
    pub epochs: usize,
    pub optim: SgdConfig,
    pub gate: GateMode,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig {
            channels: 64,
            epochs: 10,
            optim: SgdConfig::default(),
            gate: GateMode::Joint,
        }
    }
}

/// Trains a shadow head and tail by cross-entropy through frozen bodies.
pub fn train_shadow(
    target: &AttackTarget<'_>,
    aux: &LabeledDataset,
    variant: ShadowVariant,
    cfg: &ShadowConfig,
    seed: u64,
) -> Result<ShadowNetwork> {
    let n = target.bodies.len();
    let routed: Vec<usize> = match variant {
        ShadowVariant::Single(i) if i >= n => {
            return Err(Error::InvalidArgument(format!("shadow body index {i} out of range for {n} bodies")))
        }
        ShadowVariant::Single(i) => vec![i],
        ShadowVariant::Adaptive => (0..n).collect(),
    };
    let mut head = shadow_head_graph(aux.image_shape(), target.feature_shape(), cfg.channels, rng::derive_seed(seed, "shadow/head"))?;
    let tail_seed = rng::derive_seed(seed, "shadow/tail");
    let template = split(&build_model(target.arch, tail_seed)?, target.plan)?.tail;
    let mut tail = if template.is_identity() {
        if routed.len() > 1 {
            return Err(Error::InvalidArgument("adaptive shadow over several bodies needs a tail".into()));
        }
        template
    } else {
        widen_input(&template, routed.len(), tail_seed)?
    };
    let adaptive = variant == ShadowVariant::Adaptive;
    let mut logits = vec![0.0f32; routed.len()];
    let mut opt_h = Sgd::new(cfg.optim, &head);
    let mut opt_t = Sgd::new(cfg.optim, &tail);
    let losses = run_epochs(aux.len(), cfg.epochs, cfg.optim.batch_size, rng::derive_seed(seed, "shadow/shuffle"), "shadow", |idx| {
        let x = aux.batch_inputs(idx);
        let (z, hc) = head.forward_cached(&x, Mode::Train)?;
        let gate = softmax(&logits);
        let mut ys = Vec::with_capacity(routed.len());
        let mut caches = Vec::with_capacity(routed.len());
        for &i in &routed {
            let (y, c) = target.bodies[i].forward_cached(&z, Mode::Eval)?;
            ys.push(y);
            caches.push(c);
        }
        let scaled: Vec<Tensor> = ys.iter().zip(&gate).map(|(y, &w)| y.scale(w)).collect();
        let refs: Vec<&Tensor> = scaled.iter().collect();
        let (out, tc) = tail.forward_cached(&Tensor::concat_channels(&refs)?, Mode::Train)?;
        let (loss, g) = cross_entropy(&out, &aux.batch_labels(idx));
        let mut gt = tail.zero_grads();
        let din = tail.backward(&tc, &g, Some(&mut gt));
        let mut dz = Tensor::zeros(z.shape());
        let mut dw = Vec::with_capacity(routed.len());
        for (k, part) in din.split_channels(routed.len())?.into_iter().enumerate() {
            dw.push(part.dot(&ys[k]));
            let d = target.bodies[routed[k]].backward(&caches[k], &part.scale(gate[k]), None);
            dz.add_assign(&d)?;
        }
        let mut gh = head.zero_grads();
        head.backward(&hc, &dz, Some(&mut gh));
        opt_h.step(&mut head, &gh)?;
        opt_t.step(&mut tail, &gt)?;
        if adaptive && cfg.gate == GateMode::Joint {
            let mean: f32 = gate.iter().zip(&dw).map(|(w, d)| w * d).sum();
            for ((a, w), d) in logits.iter_mut().zip(&gate).zip(&dw) {
                *a -= cfg.optim.lr * w * (d - mean);
            }
        }
        Ok(loss)
    })?;
    Ok(ShadowNetwork {
        shadow_head: head,
        shadow_tail: tail,
        target_bodies: routed,
        gate: adaptive.then(|| softmax(&logits)),
        epoch_losses: losses,
    })
}

impl ShadowNetwork {
    /// Shadow pipeline logits through the given bodies.
    pub fn logits(&self, bodies: &[ModelGraph], x: &Tensor) -> Result<Tensor> {
        let z = self.shadow_head.forward(x)?;
        let ones = vec![1.0; self.target_bodies.len()];
        let gate = self.gate.as_ref().unwrap_or(&ones);
        let ys: Vec<Tensor> = self
            .target_bodies
            .iter()
            .zip(gate)
            .map(|(&i, &w)| Ok(bodies[i].forward(&z)?.scale(w)))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = ys.iter().collect();
        self.shadow_tail.forward(&Tensor::concat_channels(&refs)?)
    }
}
