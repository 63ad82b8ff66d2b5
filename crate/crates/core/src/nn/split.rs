use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::ModelGraph;
use crate::nn::layer::{BatchNorm2d, Conv2d, Layer, Linear, ResidualBlock};
use crate::tensor::Tensor;

/// Client-owned leading (`head_depth`) and trailing (`tail_depth`) split units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub head_depth: usize,
    pub tail_depth: usize,
}

impl SplitPlan {
    pub fn new(head_depth: usize, tail_depth: usize) -> Self {
        SplitPlan {
            head_depth,
            tail_depth,
        }
    }

    pub fn validate(&self, units: usize) -> Result<()> {
        if self.head_depth == 0 || self.head_depth + self.tail_depth >= units {
            return Err(Error::InvalidSplit {
                head: self.head_depth,
                tail: self.tail_depth,
                units,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPartition {
    pub head: ModelGraph,
    pub body: ModelGraph,
    pub tail: ModelGraph,
}

impl ModelPartition {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.head.forward(x)?;
        let y = self.body.forward(&z)?;
        self.tail.forward(&y)
    }

    /// Reassembles the unsplit graph.
    pub fn join(self) -> Result<ModelGraph> {
        let input = self.head.input_shape().to_vec();
        let name = self.head.name().trim_end_matches("/head").to_string();
        let mut units = self.head.into_units();
        units.extend(self.body.into_units());
        units.extend(self.tail.into_units());
        ModelGraph::new(name, input, units)
    }
}

fn part(name: String, input: &[usize], units: Vec<crate::nn::graph::SplitUnit>) -> Result<ModelGraph> {
    if units.is_empty() {
        return Ok(ModelGraph::identity(input.to_vec()));
    }
    ModelGraph::new(name, input.to_vec(), units)
}

pub fn split(model: &ModelGraph, plan: SplitPlan) -> Result<ModelPartition> {
    let n = model.unit_count();
    plan.validate(n)?;
    let units = model.units();
    let body_end = n - plan.tail_depth;
    let head = part(
        format!("{}/head", model.name()),
        model.input_shape(),
        units[..plan.head_depth].to_vec(),
    )?;
    let body = part(
        format!("{}/body", model.name()),
        head.output_shape(),
        units[plan.head_depth..body_end].to_vec(),
    )?;
    let tail = part(
        format!("{}/tail", model.name()),
        body.output_shape(),
        units[body_end..].to_vec(),
    )?;
    Ok(ModelPartition { head, body, tail })
}

fn layer_name(param: &str, suffix: &str) -> String {
    param.strip_suffix(suffix).unwrap_or(param).to_string()
}

/// Rebuilds `graph` so it accepts `factor` times as many input channels (or
/// features). Layers up to and including the first weighted one are
/// re-initialized from `seed`; everything after is kept.
pub fn widen_input(graph: &ModelGraph, factor: usize, seed: u64) -> Result<ModelGraph> {
    if factor == 0 || graph.is_identity() {
        return Err(Error::InvalidArgument(format!(
            "cannot widen {} by a factor of {factor}",
            if graph.is_identity() { "an identity graph" } else { "a graph" }
        )));
    }
    let mut units = graph.units().to_vec();
    let mut done = false;
    'outer: for unit in &mut units {
        for layer in &mut unit.layers {
            match layer {
                Layer::Relu | Layer::Sigmoid | Layer::Softmax | Layer::MaxPool2d { .. } | Layer::GlobalAvgPool | Layer::Flatten => {}
                Layer::BatchNorm2d(bn) => {
                    *bn = BatchNorm2d::new(&layer_name(&bn.gamma.name, ".gamma"), bn.gamma.value.len() * factor);
                }
                Layer::Linear(l) => {
                    let s = l.weight.value.shape().to_vec();
                    *l = Linear::new(&layer_name(&l.weight.name, ".weight"), s[1] * factor, s[0], seed);
                    done = true;
                    break 'outer;
                }
                Layer::Conv2d(c) => {
                    let s = c.weight.value.shape().to_vec();
                    *c = Conv2d::new(
                        &layer_name(&c.weight.name, ".weight"),
                        s[1] * factor,
                        s[0],
                        s[2],
                        c.stride,
                        c.pad,
                        c.bias.is_some(),
                        seed,
                    );
                    done = true;
                    break 'outer;
                }
                Layer::Residual(r) => {
                    let s = r.conv1.weight.value.shape().to_vec();
                    let name = layer_name(&r.conv1.weight.name, ".conv1.weight");
                    **r = ResidualBlock::new(&name, s[1] * factor, s[0], r.conv1.stride, seed);
                    done = true;
                    break 'outer;
                }
                Layer::ConvTranspose2d(_) => {
                    return Err(Error::InvalidArgument("widening a transposed convolution is not supported".into()));
                }
            }
        }
    }
    if !done {
        return Err(Error::InvalidArgument(format!("{} has no weighted layer to widen", graph.name())));
    }
    let mut input = graph.input_shape().to_vec();
    input[0] *= factor;
    ModelGraph::new(graph.name(), input, units)
}
