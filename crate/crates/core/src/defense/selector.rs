use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// The client's secret choice of `P` out of `N` bodies and their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorKey {
    pub n: usize,
    /// Strictly increasing body indices.
    pub activated: Vec<usize>,
    pub weights: Vec<f32>,
}

impl SelectorKey {
    pub fn new(n: usize, activated: Vec<usize>, weights: Vec<f32>) -> Result<Self> {
        if activated.is_empty() || activated.len() > n {
            return Err(Error::InvalidSelector(format!("P = {} must be in 1..={n}", activated.len())));
        }
        if activated.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSelector(format!("indices {activated:?} are not strictly increasing")));
        }
        if let Some(&bad) = activated.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidSelector(format!("index {bad} out of range for N = {n}")));
        }
        if weights.len() != activated.len() {
            return Err(Error::InvalidSelector(format!(
                "{} weights for {} indices",
                weights.len(),
                activated.len()
            )));
        }
        Ok(SelectorKey { n, activated, weights })
    }

    /// Equal weights `1/P`.
    pub fn uniform(n: usize, activated: Vec<usize>) -> Result<Self> {
        let p = activated.len().max(1);
        Self::new(n, activated, vec![1.0 / p as f32; p])
    }

    pub fn p(&self) -> usize {
        self.activated.len()
    }
}

/// Uniformly random `P`-subset of `0..N` from the seeded stream.
pub fn choose_selector(n: usize, p: usize, seed: u64) -> Result<SelectorKey> {
    if p == 0 || p > n {
        return Err(Error::InvalidSelector(format!("P = {p} must be in 1..={n}")));
    }
    let mut picked = index::sample(&mut rng::stream(seed, "selector"), n, p).into_vec();
    picked.sort_unstable();
    SelectorKey::uniform(n, picked)
}

/// Concatenates the activated maps along channels, each scaled by its weight.
pub fn selector_combine(outputs: &[Tensor], key: &SelectorKey) -> Result<Tensor> {
    if outputs.len() != key.n {
        return Err(Error::InvalidSelector(format!(
            "key expects {} outputs, got {}",
            key.n,
            outputs.len()
        )));
    }
    if let Some(&bad) = key.activated.iter().find(|&&i| i >= outputs.len()) {
        return Err(Error::InvalidSelector(format!("index {bad} out of range for {} outputs", outputs.len())));
    }
    if let Some(o) = outputs.iter().find(|o| o.shape() != outputs[0].shape()) {
        return Err(Error::shape(outputs[0].shape(), o.shape()));
    }
    let scaled: Vec<Tensor> = key
        .activated
        .iter()
        .zip(&key.weights)
        .map(|(&i, &s)| outputs[i].scale(s))
        .collect();
    let refs: Vec<&Tensor> = scaled.iter().collect();
    Tensor::concat_channels(&refs)
}

/// `dot(a, b) / (|a| |b|)`, or 0 when either vector is zero.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "cosine of unequal lengths");
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32
}

/// Batch mean of per-sample cosine similarity, and its gradient w.r.t. `a`.
pub fn batch_cosine(a: &Tensor, b: &Tensor) -> Result<(f32, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let batch = a.batch().max(1);
    let mut grad = Tensor::zeros(a.shape());
    let mut total = 0.0f64;
    for i in 0..a.batch() {
        let (x, y) = (a.sample(i), b.sample(i));
        let nx = x.iter().map(|v| f64::from(v * v)).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| f64::from(v * v)).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        let cs = f64::from(cosine_similarity(x, y));
        total += cs;
        let g = grad.sample_mut(i);
        for ((gv, &xv), &yv) in g.iter_mut().zip(x).zip(y) {
            *gv = ((f64::from(yv) / (nx * ny) - cs * f64::from(xv) / (nx * nx)) / batch as f64) as f32;
        }
    }
    Ok(((total / batch as f64) as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let v = [1.0, -2.0, 3.0];
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-7);
        assert!((cosine_similarity(&v, &[-1.0, 2.0, -3.0]) + 1.0).abs() < 1e-7);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn batch_cosine_gradient() {
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng::stream(1, "a"));
        let b = Tensor::randn(&[3, 5], 1.0, &mut rng::stream(1, "b"));
        let (_, g) = batch_cosine(&a, &b).unwrap();
        let eps = 1e-3;
        for i in 0..a.len() {
            let mut p = a.clone();
            p.data_mut()[i] += eps;
            let mut m = a.clone();
            m.data_mut()[i] -= eps;
            let num = (batch_cosine(&p, &b).unwrap().0 - batch_cosine(&m, &b).unwrap().0) / (2.0 * eps);
            assert!((num - g.data()[i]).abs() < 2e-3, "{i}: {num} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn full_selection() {
        for seed in 0..5 {
            assert_eq!(choose_selector(3, 3, seed).unwrap().activated, vec![0, 1, 2]);
        }
        assert!(choose_selector(3, 0, 0).is_err());
        assert!(choose_selector(3, 4, 0).is_err());
    }

    #[test]
    fn combine_ones_and_zeros() {
        let key = SelectorKey::uniform(2, vec![0, 1]).unwrap();
        let out = selector_combine(&[Tensor::full(&[1, 1, 2, 2], 1.0), Tensor::zeros(&[1, 1, 2, 2])], &key).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let bad = SelectorKey { n: 2, activated: vec![0, 2], weights: vec![0.5, 0.5] };
        assert!(selector_combine(&[Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])], &bad).is_err());
    }
}
