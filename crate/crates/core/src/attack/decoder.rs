use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::layer::{Conv2d, ConvTranspose2d, Layer, Mode};
use crate::nn::train::{mse, run_epochs};
use crate::nn::{ModelGraph, Sgd, SgdConfig, SplitUnit};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub epochs: usize,
    pub optim: SgdConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: 32,
            epochs: 10,
            optim: SgdConfig::default(),
        }
    }
}

/// Maps head-output features back to `[0, 1]` images.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub graph: ModelGraph,
    pub initial_mse: f32,
    pub epoch_mse: Vec<f32>,
}

impl Decoder {
    pub fn final_mse(&self) -> f32 {
        self.epoch_mse.last().copied().unwrap_or(self.initial_mse)
    }
}

/// conv3×3, one stride-2 transposed conv per 2× upsampling, conv3×3, sigmoid.
pub fn decoder_graph(feature: &[usize], image: &[usize], channels: usize, seed: u64) -> Result<ModelGraph> {
    let (&[cf, hf, wf], &[ci, hi, wi]) = (feature, image) else {
        return Err(Error::InvalidArgument(format!(
            "decoder needs CHW shapes, got {feature:?} and {image:?}"
        )));
    };
    let bad = || Error::InvalidArgument(format!("cannot upsample {feature:?} to {image:?} by powers of two"));
    if hf == 0 || wf == 0 || hi % hf != 0 || wi % wf != 0 || hi / hf != wi / wf || !(hi / hf).is_power_of_two() {
        return Err(bad());
    }
    let ups = (hi / hf).trailing_zeros() as usize;
    let mut units = vec![SplitUnit::new(
        "in",
        vec![Layer::Conv2d(Conv2d::new("dec.in", cf, channels, 3, 1, 1, true, seed)), Layer::Relu],
    )];
    for k in 0..ups {
        units.push(SplitUnit::new(
            format!("up{k}"),
            vec![
                Layer::ConvTranspose2d(ConvTranspose2d::new(&format!("dec.up{k}"), channels, channels, 4, 2, 1, 0, seed)),
                Layer::Relu,
            ],
        ));
    }
    units.push(SplitUnit::new(
        "out",
        vec![Layer::Conv2d(Conv2d::new("dec.out", channels, ci, 3, 1, 1, true, seed)), Layer::Sigmoid],
    ));
    let g = ModelGraph::new("decoder", feature.to_vec(), units)?;
    if g.output_shape() != image {
        return Err(bad());
    }
    Ok(g)
}

fn features_of(head: &ModelGraph, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.batch();
    let mut parts = Vec::new();
    for start in (0..n).step_by(256) {
        parts.push(head.forward(&inputs.slice_batch(start, (start + 256).min(n)))?);
    }
    Tensor::stack_batches(&parts)
}

/// Trains a decoder by MSE from `head(x)` to the raw image of `x`.
pub fn train_decoder(head: &ModelGraph, aux: &LabeledDataset, cfg: &DecoderConfig, seed: u64) -> Result<Decoder> {
    let mut graph = decoder_graph(head.output_shape(), aux.image_shape(), cfg.channels, rng::derive_seed(seed, "decoder/init"))?;
    let feats = features_of(head, aux.inputs())?;
    let initial_mse = mse(&graph.forward(&feats)?, aux.images())?.0;
    let mut opt = Sgd::new(cfg.optim, &graph);
    let epoch_mse = run_epochs(aux.len(), cfg.epochs, cfg.optim.batch_size, rng::derive_seed(seed, "decoder/shuffle"), "decoder", |idx| {
        let (out, cache) = graph.forward_cached(&feats.select(idx), Mode::Train)?;
        let (loss, g) = mse(&out, &aux.batch_images(idx))?;
        let mut grads = graph.zero_grads();
        graph.backward(&cache, &g, Some(&mut grads));
        opt.step(&mut graph, &grads)?;
        Ok(loss)
    })?;
    Ok(Decoder {
        graph,
        initial_mse,
        epoch_mse,
    })
}

/// One image per intercepted feature map, clipped to `[0, 1]`.
pub fn reconstruct(decoder: &Decoder, intercepted: &Tensor) -> Result<Tensor> {
    Ok(decoder.graph.forward(intercepted)?.map(|v| v.clamp(0.0, 1.0)))
}
