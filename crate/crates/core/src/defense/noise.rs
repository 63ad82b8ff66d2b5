use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A fixed additive noise tensor shaped like one head output.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f32,
    pub seed: u64,
    pub tensor: Tensor,
}

impl NoiseSpec {
    /// Draws the tensor once from `N(0, sigma)`.
    pub fn sample(sigma: f32, seed: u64, shape: &[usize]) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(NoiseSpec {
            sigma,
            seed,
            tensor: Tensor::randn(shape, sigma, &mut rng::stream(seed, "noise")),
        })
    }

    pub fn zero(shape: &[usize]) -> Self {
        NoiseSpec {
            sigma: 0.0,
            seed: 0,
            tensor: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// Adds the tensor to every sample of `z`.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        z.add_broadcast(&self.tensor)
    }

    pub fn norm(&self) -> f32 {
        self.tensor.dot(&self.tensor).sqrt()
    }
}

/// Inverted dropout on the head output with its own mask stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f32,
    pub seed: u64,
}

pub const DEFAULT_DROPOUT: f32 = 0.3;

impl DropoutSpec {
    pub fn new(rate: f32, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(DropoutSpec { rate, seed })
    }

    /// Mask of `0` or `1/(1-rate)` entries for the given call index.
    pub fn mask(&self, shape: &[usize], call: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::stream(self.seed, &format!("dropout/{call}"));
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mut m = Tensor::zeros(shape);
        for v in m.data_mut() {
            if r.random::<f32>() < keep {
                *v = scale;
            }
        }
        m
    }
}
