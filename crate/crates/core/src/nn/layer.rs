//! Layers with explicit forward/backward passes.
//!
//! Every layer exposes its parameters in a fixed order. Gradient buffers passed
//! to [`Layer::backward`] are aligned with that order. Slots belonging to
//! [`ParamKind::Buffer`] parameters (batch-norm running statistics) receive the
//! statistic observed in a training-mode batch instead of a gradient.

use crate::error::{Error, Result};
use crate::nn::ops::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, max_pool, ConvGeom};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

impl Param {
    fn weight(name: String, value: Tensor) -> Self {
        Param {
            name,
            value,
            kind: ParamKind::Weight,
        }
    }

    fn buffer(name: String, value: Tensor) -> Self {
        Param {
            name,
            value,
            kind: ParamKind::Buffer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and reports them for running-stat updates.
    Train,
    Eval,
}

fn he_normal(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f32).sqrt();
    Tensor::randn(shape, std, &mut rng::stream(seed, &format!("init/{name}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.weight");
        let weight = he_normal(&wname, &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, seed);
        Conv2d {
            weight: Param::weight(wname, weight),
            bias: bias.then(|| Param::weight(format!("{name}.bias"), Tensor::zeros(&[out_ch]))),
            stride,
            pad,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2])
    }

    fn geom(&self, input: &[usize]) -> ConvGeom {
        let (_, in_ch, k) = self.dims();
        ConvGeom {
            channels: in_ch,
            height: input[1],
            width: input[2],
            kernel: k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (out_ch, in_ch, _) = self.dims();
        if input.len() != 3 || input[0] != in_ch {
            return Err(Error::shape(&[in_ch, 0, 0], input));
        }
        let (oh, ow) = self
            .geom(input)
            .out_hw()
            .ok_or_else(|| Error::shape(&[in_ch, self.dims().2, self.dims().2], input))?;
        Ok(vec![out_ch, oh, ow])
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (out_ch, _, _) = self.dims();
        let g = self.geom(x.sample_shape());
        let (oh, ow) = g.out_hw().expect("validated shape");
        let spatial = oh * ow;
        let mut out = Tensor::zeros(&[x.batch(), out_ch, oh, ow]);
        let mut cols = vec![0.0; g.col_rows() * spatial];
        let w = self.weight.value.data();
        for b in 0..x.batch() {
            im2col(x.sample(b), &g, &mut cols);
            let o = out.sample_mut(b);
            gemm_nn(out_ch, spatial, g.col_rows(), w, &cols, o);
            if let Some(bias) = &self.bias {
                for (c, &bv) in bias.value.data().iter().enumerate() {
                    o[c * spatial..(c + 1) * spatial].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: Option<&mut [Tensor]>) -> Tensor {
        let (out_ch, _, _) = self.dims();
        let g = self.geom(x.sample_shape());
        let (oh, ow) = g.out_hw().expect("validated shape");
        let spatial = oh * ow;
        let rows = g.col_rows();
        let w = self.weight.value.data();
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![0.0; rows * spatial];
        let mut dcols = vec![0.0; rows * spatial];
        let mut grads = grads;
        for b in 0..x.batch() {
            let dout = grad_out.sample(b);
            if let Some(gs) = grads.as_deref_mut() {
                im2col(x.sample(b), &g, &mut cols);
                gemm_nt(out_ch, rows, spatial, dout, &cols, gs[0].data_mut());
                if self.bias.is_some() {
                    let db = gs[1].data_mut();
                    for c in 0..out_ch {
                        db[c] += dout[c * spatial..(c + 1) * spatial].iter().sum::<f32>();
                    }
                }
            }
            dcols.fill(0.0);
            gemm_tn(rows, spatial, out_ch, w, dout, &mut dcols);
            col2im(&dcols, &g, dx.sample_mut(b));
        }
        dx
    }
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.weight");
        let weight = he_normal(&wname, &[in_ch, out_ch, kernel, kernel], in_ch * kernel * kernel / (stride * stride).max(1), seed);
        ConvTranspose2d {
            weight: Param::weight(wname, weight),
            bias: Param::weight(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
            output_pad,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1], s[2])
    }

    /// Geometry of the adjoint convolution (output space → input space).
    fn geom(&self, input: &[usize]) -> Option<ConvGeom> {
        let (_, out_ch, k) = self.dims();
        let grow = |n: usize| ((n - 1) * self.stride + k + self.output_pad).checked_sub(2 * self.pad);
        let g = ConvGeom {
            channels: out_ch,
            height: grow(input[1])?,
            width: grow(input[2])?,
            kernel: k,
            stride: self.stride,
            pad: self.pad,
        };
        (g.out_hw() == Some((input[1], input[2]))).then_some(g)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (in_ch, out_ch, _) = self.dims();
        if input.len() != 3 || input[0] != in_ch || input[1] == 0 || input[2] == 0 {
            return Err(Error::shape(&[in_ch, 0, 0], input));
        }
        let g = self.geom(input).ok_or_else(|| Error::shape(&[in_ch, 0, 0], input))?;
        Ok(vec![out_ch, g.height, g.width])
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (in_ch, out_ch, _) = self.dims();
        let g = self.geom(x.sample_shape()).expect("validated shape");
        let spatial = x.sample_shape()[1] * x.sample_shape()[2];
        let rows = g.col_rows();
        let out_spatial = g.height * g.width;
        let mut out = Tensor::zeros(&[x.batch(), out_ch, g.height, g.width]);
        let mut cols = vec![0.0; rows * spatial];
        for b in 0..x.batch() {
            cols.fill(0.0);
            gemm_tn(rows, spatial, in_ch, self.weight.value.data(), x.sample(b), &mut cols);
            let o = out.sample_mut(b);
            col2im(&cols, &g, o);
            for (c, &bv) in self.bias.value.data().iter().enumerate() {
                o[c * out_spatial..(c + 1) * out_spatial].iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    }

    fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: Option<&mut [Tensor]>) -> Tensor {
        let (in_ch, out_ch, _) = self.dims();
        let g = self.geom(x.sample_shape()).expect("validated shape");
        let spatial = x.sample_shape()[1] * x.sample_shape()[2];
        let rows = g.col_rows();
        let out_spatial = g.height * g.width;
        let mut dx = Tensor::zeros(x.shape());
        let mut dcols = vec![0.0; rows * spatial];
        let mut grads = grads;
        for b in 0..x.batch() {
            let dout = grad_out.sample(b);
            im2col(dout, &g, &mut dcols);
            gemm_nn(in_ch, spatial, rows, self.weight.value.data(), &dcols, dx.sample_mut(b));
            if let Some(gs) = grads.as_deref_mut() {
                gemm_nt(in_ch, rows, spatial, x.sample(b), &dcols, gs[0].data_mut());
                let db = gs[1].data_mut();
                for c in 0..out_ch {
                    db[c] += dout[c * out_spatial..(c + 1) * out_spatial].iter().sum::<f32>();
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::weight(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Param::weight(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            eps: 1e-5,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, BatchNormCache) {
        let c_n = self.channels();
        let spatial = x.sample_len() / c_n;
        let count = (x.batch() * spatial) as f32;
        let (mean, var, unbiased) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f32; c_n];
                let mut var = vec![0.0f32; c_n];
                for b in 0..x.batch() {
                    let s = x.sample(b);
                    for c in 0..c_n {
                        mean[c] += s[c * spatial..(c + 1) * spatial].iter().sum::<f32>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..x.batch() {
                    let s = x.sample(b);
                    for c in 0..c_n {
                        var[c] += s[c * spatial..(c + 1) * spatial]
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f32>();
                    }
                }
                let unbiased = var.iter().map(|v| v / (count - 1.0).max(1.0)).collect();
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, Some(unbiased))
            }
            Mode::Eval => (
                self.running_mean.value.data().to_vec(),
                self.running_var.value.data().to_vec(),
                None,
            ),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for b in 0..x.batch() {
            let s = x.sample(b);
            let xh = xhat.sample_mut(b);
            for c in 0..c_n {
                for i in c * spatial..(c + 1) * spatial {
                    xh[i] = (s[i] - mean[c]) * inv_std[c];
                }
            }
            let o = out.sample_mut(b);
            let xh = xhat.sample(b);
            for c in 0..c_n {
                for i in c * spatial..(c + 1) * spatial {
                    o[i] = gamma[c] * xh[i] + beta[c];
                }
            }
        }
        let stats = unbiased.map(|u| (mean, u));
        (
            out,
            BatchNormCache {
                xhat,
                inv_std,
                mode,
                stats,
            },
        )
    }

    fn backward(&self, cache: &BatchNormCache, grad_out: &Tensor, grads: Option<&mut [Tensor]>) -> Tensor {
        let c_n = self.channels();
        let spatial = grad_out.sample_len() / c_n;
        let count = (grad_out.batch() * spatial) as f32;
        let gamma = self.gamma.value.data();
        let mut sum_dy = vec![0.0f32; c_n];
        let mut sum_dy_xhat = vec![0.0f32; c_n];
        for b in 0..grad_out.batch() {
            let dy = grad_out.sample(b);
            let xh = cache.xhat.sample(b);
            for c in 0..c_n {
                for i in c * spatial..(c + 1) * spatial {
                    sum_dy[c] += dy[i];
                    sum_dy_xhat[c] += dy[i] * xh[i];
                }
            }
        }
        if let Some(gs) = grads {
            for c in 0..c_n {
                gs[0].data_mut()[c] += sum_dy_xhat[c];
                gs[1].data_mut()[c] += sum_dy[c];
            }
            if let Some((mean, var)) = &cache.stats {
                gs[2] = Tensor::new(vec![c_n], mean.clone()).expect("channel count");
                gs[3] = Tensor::new(vec![c_n], var.clone()).expect("channel count");
            }
        }
        let mut dx = Tensor::zeros(grad_out.shape());
        for b in 0..grad_out.batch() {
            let dy = grad_out.sample(b);
            let xh = cache.xhat.sample(b);
            let d = dx.sample_mut(b);
            for c in 0..c_n {
                let k = gamma[c] * cache.inv_std[c];
                for i in c * spatial..(c + 1) * spatial {
                    d[i] = match cache.mode {
                        Mode::Train => k * (dy[i] - sum_dy[c] / count - xh[i] * sum_dy_xhat[c] / count),
                        Mode::Eval => k * dy[i],
                    };
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        let bound = 1.0 / (in_features.max(1) as f32).sqrt();
        let weight = Tensor::uniform(
            &[out_features, in_features],
            bound,
            &mut rng::stream(seed, &format!("init/{wname}")),
        );
        Linear {
            weight: Param::weight(wname, weight),
            bias: Param::weight(format!("{name}.bias"), Tensor::zeros(&[out_features])),
        }
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1])
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (out_f, in_f) = self.dims();
        let mut out = Tensor::zeros(&[x.batch(), out_f]);
        gemm_nt(x.batch(), out_f, in_f, x.data(), self.weight.value.data(), out.data_mut());
        let bias = self.bias.value.data();
        for b in 0..x.batch() {
            for (o, bv) in out.sample_mut(b).iter_mut().zip(bias) {
                *o += bv;
            }
        }
        out
    }

    fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: Option<&mut [Tensor]>) -> Tensor {
        let (out_f, in_f) = self.dims();
        let batch = x.batch();
        if let Some(gs) = grads {
            gemm_tn(out_f, in_f, batch, grad_out.data(), x.data(), gs[0].data_mut());
            let db = gs[1].data_mut();
            for b in 0..batch {
                for (d, g) in db.iter_mut().zip(grad_out.sample(b)) {
                    *d += g;
                }
            }
        }
        let mut dx = Tensor::zeros(&[batch, in_f]);
        gemm_nn(batch, in_f, out_f, grad_out.data(), self.weight.value.data(), dx.data_mut());
        dx
    }
}

/// Two 3×3 conv/batch-norm stages with an identity or projected shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, seed: u64) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(&format!("{name}.down"), in_ch, out_ch, 1, stride, 0, false, seed),
                BatchNorm2d::new(&format!("{name}.down_bn"), out_ch),
            )
        });
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, seed),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, seed),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            shortcut,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    Sigmoid,
    Softmax,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Linear(Linear),
    Residual(Box<ResidualBlock>),
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    mode: Mode,
    stats: Option<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    x: Tensor,
    bn1: BatchNormCache,
    h3: Tensor,
    bn2: BatchNormCache,
    shortcut_bn: Option<BatchNormCache>,
    out: Tensor,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(Tensor),
    Output(Tensor),
    BatchNorm(BatchNormCache),
    Pool { input_shape: Vec<usize>, argmax: Vec<u32> },
    Shape(Vec<usize>),
    Residual(Box<ResidualCache>),
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn relu_backward(out: &Tensor, grad: &Tensor) -> Tensor {
    out.zip_with(grad, |y, g| if y > 0.0 { g } else { 0.0 })
        .expect("same shape")
}

impl Layer {
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::ConvTranspose2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm2d(bn) => vec![&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Residual(r) => {
                let mut p = vec![&r.conv1.weight];
                p.extend([&r.bn1.gamma, &r.bn1.beta, &r.bn1.running_mean, &r.bn1.running_var]);
                p.push(&r.conv2.weight);
                p.extend([&r.bn2.gamma, &r.bn2.beta, &r.bn2.running_mean, &r.bn2.running_var]);
                if let Some((c, bn)) = &r.shortcut {
                    p.push(&c.weight);
                    p.extend([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]);
                }
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::ConvTranspose2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm2d(bn) => vec![
                &mut bn.gamma,
                &mut bn.beta,
                &mut bn.running_mean,
                &mut bn.running_var,
            ],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Residual(r) => {
                let r = &mut **r;
                let mut p = vec![&mut r.conv1.weight];
                p.extend([
                    &mut r.bn1.gamma,
                    &mut r.bn1.beta,
                    &mut r.bn1.running_mean,
                    &mut r.bn1.running_var,
                ]);
                p.push(&mut r.conv2.weight);
                p.extend([
                    &mut r.bn2.gamma,
                    &mut r.bn2.beta,
                    &mut r.bn2.running_mean,
                    &mut r.bn2.running_var,
                ]);
                if let Some((c, bn)) = &mut r.shortcut {
                    p.push(&mut c.weight);
                    p.extend([&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var]);
                }
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => 1 + usize::from(c.bias.is_some()),
            Layer::ConvTranspose2d(_) | Layer::Linear(_) => 2,
            Layer::BatchNorm2d(_) => 4,
            Layer::Residual(r) => 10 + if r.shortcut.is_some() { 5 } else { 0 },
            _ => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::ConvTranspose2d(_) => "conv_transpose",
            Layer::BatchNorm2d(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
            Layer::MaxPool2d { .. } => "max_pool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "fully_connected",
            Layer::Residual(_) => "residual_block",
        }
    }

    /// Per-sample output shape, or an error when `input` is incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::ConvTranspose2d(c) => c.output_shape(input),
            Layer::BatchNorm2d(bn) => {
                if input.len() != 3 || input[0] != bn.channels() {
                    return Err(Error::shape(&[bn.channels(), 0, 0], input));
                }
                Ok(input.to_vec())
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Softmax => {
                if input.len() != 1 {
                    return Err(Error::shape(&[0], input));
                }
                Ok(input.to_vec())
            }
            Layer::MaxPool2d { kernel, stride } => {
                if input.len() != 3 || input[1] < *kernel || input[2] < *kernel {
                    return Err(Error::shape(&[0, *kernel, *kernel], input));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(Error::shape(&[0, 0, 0], input));
                }
                Ok(vec![input[0]])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear(l) => {
                let (out_f, in_f) = l.dims();
                if input != [in_f] {
                    return Err(Error::shape(&[in_f], input));
                }
                Ok(vec![out_f])
            }
            Layer::Residual(r) => {
                let a = r.conv1.output_shape(input)?;
                let b = r.conv2.output_shape(&a)?;
                if let Some((c, _)) = &r.shortcut {
                    let s = c.output_shape(input)?;
                    if s != b {
                        return Err(Error::shape(&b, &s));
                    }
                } else if b != input {
                    return Err(Error::shape(&b, input));
                }
                Ok(b)
            }
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, LayerCache) {
        match self {
            Layer::Conv2d(c) => (c.forward(x), LayerCache::Input(x.clone())),
            Layer::ConvTranspose2d(c) => (c.forward(x), LayerCache::Input(x.clone())),
            Layer::Linear(l) => (l.forward(x), LayerCache::Input(x.clone())),
            Layer::BatchNorm2d(bn) => {
                let (y, cache) = bn.forward(x, mode);
                (y, LayerCache::BatchNorm(cache))
            }
            Layer::Relu => {
                let y = relu(x);
                (y.clone(), LayerCache::Output(y))
            }
            Layer::Sigmoid => {
                let y = x.map(|v| 1.0 / (1.0 + (-v).exp()));
                (y.clone(), LayerCache::Output(y))
            }
            Layer::Softmax => {
                let mut y = x.clone();
                for b in 0..y.batch() {
                    let row = y.sample_mut(b);
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= total);
                }
                (y.clone(), LayerCache::Output(y))
            }
            Layer::MaxPool2d { kernel, stride } => {
                let s = x.sample_shape();
                let out_shape = self.output_shape(s).expect("validated shape");
                let mut out_full = vec![x.batch()];
                out_full.extend(&out_shape);
                let mut y = Tensor::zeros(&out_full);
                let per = y.sample_len();
                let mut argmax = vec![0u32; per * x.batch()];
                for b in 0..x.batch() {
                    max_pool(
                        x.sample(b),
                        s[0],
                        s[1],
                        s[2],
                        *kernel,
                        *stride,
                        y.sample_mut(b),
                        &mut argmax[b * per..(b + 1) * per],
                    );
                }
                (
                    y,
                    LayerCache::Pool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            Layer::GlobalAvgPool => {
                let c = x.sample_shape()[0];
                let spatial = x.sample_len() / c;
                let mut y = Tensor::zeros(&[x.batch(), c]);
                for b in 0..x.batch() {
                    let s = x.sample(b);
                    for ch in 0..c {
                        y.sample_mut(b)[ch] =
                            s[ch * spatial..(ch + 1) * spatial].iter().sum::<f32>() / spatial as f32;
                    }
                }
                (y, LayerCache::Shape(x.shape().to_vec()))
            }
            Layer::Flatten => {
                let y = x
                    .clone()
                    .reshape(&[x.batch(), x.sample_len()])
                    .expect("same element count");
                (y, LayerCache::Shape(x.shape().to_vec()))
            }
            Layer::Residual(r) => {
                let h1 = r.conv1.forward(x);
                let (h2, bn1) = r.bn1.forward(&h1, mode);
                let h3 = relu(&h2);
                let h4 = r.conv2.forward(&h3);
                let (h5, bn2) = r.bn2.forward(&h4, mode);
                let (skip, shortcut_bn) = match &r.shortcut {
                    Some((c, bn)) => {
                        let (s, cache) = bn.forward(&c.forward(x), mode);
                        (s, Some(cache))
                    }
                    None => (x.clone(), None),
                };
                let out = relu(&h5.add(&skip).expect("validated shape"));
                (
                    out.clone(),
                    LayerCache::Residual(Box::new(ResidualCache {
                        x: x.clone(),
                        bn1,
                        h3,
                        bn2,
                        shortcut_bn,
                        out,
                    })),
                )
            }
        }
    }

    /// Backward pass. When `grads` is given it must hold `param_count()` slots
    /// shaped like the parameters; weight gradients are accumulated into them.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor, grads: Option<&mut [Tensor]>) -> Tensor {
        match (self, cache) {
            (Layer::Conv2d(c), LayerCache::Input(x)) => c.backward(x, grad_out, grads),
            (Layer::ConvTranspose2d(c), LayerCache::Input(x)) => c.backward(x, grad_out, grads),
            (Layer::Linear(l), LayerCache::Input(x)) => l.backward(x, grad_out, grads),
            (Layer::BatchNorm2d(bn), LayerCache::BatchNorm(c)) => bn.backward(c, grad_out, grads),
            (Layer::Relu, LayerCache::Output(y)) => relu_backward(y, grad_out),
            (Layer::Sigmoid, LayerCache::Output(y)) => {
                y.zip_with(grad_out, |s, g| g * s * (1.0 - s)).expect("same shape")
            }
            (Layer::Softmax, LayerCache::Output(y)) => {
                let mut dx = grad_out.clone();
                for b in 0..y.batch() {
                    let yr = y.sample(b);
                    let inner: f32 = yr.iter().zip(grad_out.sample(b)).map(|(a, g)| a * g).sum();
                    for (d, &yv) in dx.sample_mut(b).iter_mut().zip(yr) {
                        *d = yv * (*d - inner);
                    }
                }
                dx
            }
            (Layer::MaxPool2d { .. }, LayerCache::Pool { input_shape, argmax }) => {
                let mut dx = Tensor::zeros(input_shape);
                let per = grad_out.sample_len();
                for b in 0..grad_out.batch() {
                    let g = grad_out.sample(b);
                    let d = dx.sample_mut(b);
                    for (o, &idx) in argmax[b * per..(b + 1) * per].iter().enumerate() {
                        d[idx as usize] += g[o];
                    }
                }
                dx
            }
            (Layer::GlobalAvgPool, LayerCache::Shape(shape)) => {
                let mut dx = Tensor::zeros(shape);
                let c = shape[1];
                let spatial = dx.sample_len() / c;
                for b in 0..shape[0] {
                    let g = grad_out.sample(b);
                    let d = dx.sample_mut(b);
                    for ch in 0..c {
                        let v = g[ch] / spatial as f32;
                        d[ch * spatial..(ch + 1) * spatial].iter_mut().for_each(|x| *x = v);
                    }
                }
                dx
            }
            (Layer::Flatten, LayerCache::Shape(shape)) => {
                grad_out.clone().reshape(shape).expect("same element count")
            }
            (Layer::Residual(r), LayerCache::Residual(c)) => {
                let g = relu_backward(&c.out, grad_out);
                let mut grads = grads;
                let (g_conv1, g_bn1, g_conv2, g_bn2, g_short) = match grads.as_deref_mut() {
                    Some(gs) => {
                        let (a, rest) = gs.split_at_mut(1);
                        let (b, rest) = rest.split_at_mut(4);
                        let (cc, rest) = rest.split_at_mut(1);
                        let (d, rest) = rest.split_at_mut(4);
                        (Some(a), Some(b), Some(cc), Some(d), Some(rest))
                    }
                    None => (None, None, None, None, None),
                };
                let d5 = r.bn2.backward(&c.bn2, &g, g_bn2);
                let d3 = r.conv2.backward(&c.h3, &d5, g_conv2);
                let d2 = relu_backward(&c.h3, &d3);
                let d1 = r.bn1.backward(&c.bn1, &d2, g_bn1);
                let mut dx = r.conv1.backward(&c.x, &d1, g_conv1);
                match (&r.shortcut, &c.shortcut_bn) {
                    (Some((conv, bn)), Some(bn_cache)) => {
                        let (gc, gb) = match g_short {
                            Some(rest) => {
                                let (a, b) = rest.split_at_mut(1);
                                (Some(a), Some(b))
                            }
                            None => (None, None),
                        };
                        let ds = bn.backward(bn_cache, &g, gb);
                        let dsx = conv.backward(&c.x, &ds, gc);
                        dx.add_assign(&dsx).expect("same shape");
                    }
                    _ => dx.add_assign(&g).expect("same shape"),
                }
                dx
            }
            (layer, _) => panic!("cache does not belong to a {} layer", layer.kind_name()),
        }
    }
}
