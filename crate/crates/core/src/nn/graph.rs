use crate::error::{Error, Result};
use crate::nn::layer::{Layer, LayerCache, Mode, Param, ParamKind};
use crate::tensor::Tensor;

/// The smallest piece a graph can be split at.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitUnit {
    pub label: String,
    pub layers: Vec<Layer>,
}

impl SplitUnit {
    pub fn new(label: impl Into<String>, layers: Vec<Layer>) -> Self {
        SplitUnit {
            label: label.into(),
            layers,
        }
    }
}

/// An ordered chain of split units with their weights.
///
/// Construction checks that every layer accepts its predecessor's output, so a
/// graph that exists is always shape-consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    units: Vec<SplitUnit>,
}

/// Per-layer caches from [`ModelGraph::forward_cached`].
#[derive(Debug, Clone)]
pub struct GraphCache {
    caches: Vec<LayerCache>,
}

/// Gradient slots aligned with [`ModelGraph::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub slots: Vec<Tensor>,
}

impl Gradients {
    pub fn scale(&mut self, s: f32) {
        for t in &mut self.slots {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, units: Vec<SplitUnit>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for unit in &units {
            for layer in &unit.layers {
                shape = layer.output_shape(&shape)?;
            }
        }
        Ok(ModelGraph {
            name: name.into(),
            input_shape,
            output_shape: shape,
            units,
        })
    }

    /// A graph with zero units; forwards its input unchanged.
    pub fn identity(input_shape: Vec<usize>) -> Self {
        ModelGraph {
            name: "identity".into(),
            output_shape: input_shape.clone(),
            input_shape,
            units: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn units(&self) -> &[SplitUnit] {
        &self.units
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn is_identity(&self) -> bool {
        self.units.is_empty()
    }

    pub(crate) fn into_units(self) -> Vec<SplitUnit> {
        self.units
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.units.iter().flat_map(|u| u.layers.iter())
    }

    pub fn ends_with_softmax(&self) -> bool {
        matches!(self.layers().last(), Some(Layer::Softmax))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.units
            .iter_mut()
            .flat_map(|u| u.layers.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.params()
            .into_iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            slots: self
                .params()
                .into_iter()
                .map(|p| match p.kind {
                    ParamKind::Weight => Tensor::zeros(p.value.shape()),
                    // Empty means "no statistic observed".
                    ParamKind::Buffer => Tensor::zeros(&[0]),
                })
                .collect(),
        }
    }

    /// FNV-1a digest over every parameter's name and raw bits.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params() {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.is_finite())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() == 0 || x.sample_shape() != self.input_shape.as_slice() {
            let mut want = vec![x.batch()];
            want.extend(&self.input_shape);
            return Err(Error::shape(&want, x.shape()));
        }
        Ok(())
    }

    /// Inference forward pass; never mutates weights.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in self.layers() {
            h = layer.forward(&h, Mode::Eval).0;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, GraphCache)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::new();
        for layer in self.layers() {
            let (out, cache) = layer.forward(&h, mode);
            caches.push(cache);
            h = out;
        }
        Ok((h, GraphCache { caches }))
    }

    /// Backpropagates `grad_out`; returns the gradient at the input. Weight
    /// gradients are accumulated into `grads` when provided.
    pub fn backward(&self, cache: &GraphCache, grad_out: &Tensor, grads: Option<&mut Gradients>) -> Tensor {
        let layers: Vec<&Layer> = self.layers().collect();
        assert_eq!(layers.len(), cache.caches.len(), "cache from a different graph");
        let mut offsets = Vec::with_capacity(layers.len());
        let mut acc = 0;
        for l in &layers {
            offsets.push(acc);
            acc += l.param_count();
        }
        let mut grads = grads;
        let mut g = grad_out.clone();
        for (i, layer) in layers.iter().enumerate().rev() {
            let slots = grads
                .as_deref_mut()
                .map(|gs| &mut gs.slots[offsets[i]..offsets[i] + layer.param_count()]);
            g = layer.backward(&cache.caches[i], &g, slots);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Conv2d, Linear};

    fn small() -> ModelGraph {
        ModelGraph::new(
            "t",
            vec![1, 4, 4],
            vec![
                SplitUnit::new("c", vec![Layer::Conv2d(Conv2d::new("c", 1, 2, 3, 1, 1, true, 3)), Layer::Relu]),
                SplitUnit::new("f", vec![Layer::Flatten, Layer::Linear(Linear::new("f", 32, 3, 3))]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rejects_incompatible_layers() {
        let err = ModelGraph::new(
            "bad",
            vec![1, 4, 4],
            vec![SplitUnit::new("f", vec![Layer::Flatten, Layer::Linear(Linear::new("f", 15, 3, 0))])],
        );
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_checks_input_shape() {
        let g = small();
        assert!(g.forward(&Tensor::zeros(&[2, 1, 4, 4])).is_ok());
        assert!(g.forward(&Tensor::zeros(&[2, 1, 5, 4])).is_err());
    }

    #[test]
    fn digest_tracks_weights() {
        let a = small();
        let mut b = small();
        assert_eq!(a.digest(), b.digest());
        b.params_mut()[0].value.data_mut()[0] += 1.0;
        assert_ne!(a.digest(), b.digest());
    }
}
