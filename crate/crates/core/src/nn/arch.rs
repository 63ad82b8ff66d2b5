//! Registered architectures.
//!
//! | name       | split units                                                     |
//! |------------|-----------------------------------------------------------------|
//! | `tiny`     | 2 conv units (conv, relu, 2×2 max-pool) + 1 fully-connected unit |
//! | `vgg-mini` | 4 conv units (pooling while spatial ≥ 2) + 1 fully-connected unit |
//! | `vgg16`    | 13 conv units (batch-norm) + 3 fully-connected units            |
//! | `resnet18` | stem conv, four stages of two residual blocks, pooled classifier |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{ModelGraph, SplitUnit};
use crate::nn::layer::{BatchNorm2d, Conv2d, Layer, Linear, ResidualBlock};

pub const ARCHITECTURES: &[&str] = &["tiny", "vgg-mini", "vgg16", "resnet18"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Base channel count; each architecture has its own default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Append a softmax to the final unit.
    #[serde(default)]
    pub softmax: bool,
}

impl ArchSpec {
    pub fn new(name: &str, input_shape: &[usize], classes: usize) -> Self {
        ArchSpec {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            classes,
            width: None,
            softmax: false,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = Some(width);
        self
    }

    pub fn with_softmax(mut self) -> Self {
        self.softmax = true;
        self
    }

    fn incompatible(&self, reason: impl Into<String>) -> Error {
        Error::IncompatibleInput {
            arch: self.name.clone(),
            shape: self.input_shape.clone(),
            reason: reason.into(),
        }
    }
}

fn conv_relu(name: &str, cin: usize, cout: usize, seed: u64) -> Vec<Layer> {
    vec![Layer::Conv2d(Conv2d::new(name, cin, cout, 3, 1, 1, true, seed)), Layer::Relu]
}

fn conv_bn_relu(name: &str, cin: usize, cout: usize, seed: u64) -> Vec<Layer> {
    vec![
        Layer::Conv2d(Conv2d::new(name, cin, cout, 3, 1, 1, false, seed)),
        Layer::BatchNorm2d(BatchNorm2d::new(&format!("{name}.bn"), cout)),
        Layer::Relu,
    ]
}

const POOL: Layer = Layer::MaxPool2d { kernel: 2, stride: 2 };

fn tiny(spec: &ArchSpec, seed: u64) -> Result<Vec<SplitUnit>> {
    let [c, h, w] = spatial(spec)?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(spec.incompatible("height and width must be multiples of 4"));
    }
    let width = spec.width.unwrap_or(8);
    let mut u0 = conv_relu("u0.conv", c, width, seed);
    u0.push(POOL);
    let mut u1 = conv_relu("u1.conv", width, 2 * width, seed);
    u1.push(POOL);
    let u2 = vec![
        Layer::Flatten,
        Layer::Linear(Linear::new("u2.fc", 2 * width * (h / 4) * (w / 4), spec.classes, seed)),
    ];
    Ok(vec![
        SplitUnit::new("conv1", u0),
        SplitUnit::new("conv2", u1),
        SplitUnit::new("fc", u2),
    ])
}

fn vgg_mini(spec: &ArchSpec, seed: u64) -> Result<Vec<SplitUnit>> {
    let [c, mut h, mut w] = spatial(spec)?;
    if h < 2 || w < 2 {
        return Err(spec.incompatible("need at least 2×2 pixels"));
    }
    let width = spec.width.unwrap_or(8);
    let channels = [width, width, 2 * width, 2 * width];
    let mut units = Vec::new();
    let mut cin = c;
    for (i, &cout) in channels.iter().enumerate() {
        let mut layers = conv_relu(&format!("u{i}.conv"), cin, cout, seed);
        if h >= 2 && w >= 2 {
            layers.push(POOL);
            h /= 2;
            w /= 2;
        }
        units.push(SplitUnit::new(format!("conv{}", i + 1), layers));
        cin = cout;
    }
    units.push(SplitUnit::new(
        "fc",
        vec![
            Layer::Flatten,
            Layer::Linear(Linear::new("u4.fc", cin * h * w, spec.classes, seed)),
        ],
    ));
    Ok(units)
}

fn vgg16(spec: &ArchSpec, seed: u64) -> Result<Vec<SplitUnit>> {
    let [c, h, w] = spatial(spec)?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(spec.incompatible("height and width must be multiples of 32"));
    }
    let base = spec.width.unwrap_or(64);
    // 'M' marks a pool that travels with the preceding conv.
    let plan: [(usize, bool); 13] = [
        (1, false),
        (1, true),
        (2, false),
        (2, true),
        (4, false),
        (4, false),
        (4, true),
        (8, false),
        (8, false),
        (8, true),
        (8, false),
        (8, false),
        (8, true),
    ];
    let mut units = Vec::new();
    let mut cin = c;
    for (i, &(mult, pool)) in plan.iter().enumerate() {
        let cout = base * mult;
        let mut layers = conv_bn_relu(&format!("u{i}.conv"), cin, cout, seed);
        if pool {
            layers.push(POOL);
        }
        units.push(SplitUnit::new(format!("conv{}", i + 1), layers));
        cin = cout;
    }
    let flat = cin * (h / 32) * (w / 32);
    let hidden = base * 8;
    units.push(SplitUnit::new(
        "fc1",
        vec![Layer::Flatten, Layer::Linear(Linear::new("u13.fc", flat, hidden, seed)), Layer::Relu],
    ));
    units.push(SplitUnit::new(
        "fc2",
        vec![Layer::Linear(Linear::new("u14.fc", hidden, hidden, seed)), Layer::Relu],
    ));
    units.push(SplitUnit::new(
        "fc3",
        vec![Layer::Linear(Linear::new("u15.fc", hidden, spec.classes, seed))],
    ));
    Ok(units)
}

fn resnet18(spec: &ArchSpec, seed: u64) -> Result<Vec<SplitUnit>> {
    let [c, h, w] = spatial(spec)?;
    if h % 16 != 0 || w % 16 != 0 {
        return Err(spec.incompatible("height and width must be multiples of 16"));
    }
    let base = spec.width.unwrap_or(64);
    let mut stem = conv_bn_relu("u0.stem", c, base, seed);
    stem.push(POOL);
    let mut units = vec![SplitUnit::new("stem", stem)];
    let mut cin = base;
    for stage in 0..4 {
        let cout = base << stage;
        let stride = if stage == 0 { 1 } else { 2 };
        let u = stage + 1;
        units.push(SplitUnit::new(
            format!("stage{u}"),
            vec![
                Layer::Residual(Box::new(ResidualBlock::new(&format!("u{u}.block1"), cin, cout, stride, seed))),
                Layer::Residual(Box::new(ResidualBlock::new(&format!("u{u}.block2"), cout, cout, 1, seed))),
            ],
        ));
        cin = cout;
    }
    units.push(SplitUnit::new(
        "fc",
        vec![
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new("u5.fc", cin, spec.classes, seed)),
        ],
    ));
    Ok(units)
}

fn spatial(spec: &ArchSpec) -> Result<[usize; 3]> {
    match spec.input_shape.as_slice() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(spec.incompatible("expected a [channels, height, width] shape")),
    }
}

/// Instantiates `spec` with weights drawn deterministically from `seed`.
pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<ModelGraph> {
    if spec.classes == 0 {
        return Err(spec.incompatible("class count must be positive"));
    }
    let mut units = match spec.name.as_str() {
        "tiny" => tiny(spec, seed)?,
        "vgg-mini" => vgg_mini(spec, seed)?,
        "vgg16" => vgg16(spec, seed)?,
        "resnet18" => resnet18(spec, seed)?,
        other => return Err(Error::UnknownArchitecture(other.to_string())),
    };
    if spec.softmax {
        units.last_mut().expect("non-empty").layers.push(Layer::Softmax);
    }
    ModelGraph::new(spec.name.clone(), spec.input_shape.clone(), units).map_err(|e| match e {
        Error::ShapeMismatch { .. } => spec.incompatible(e.to_string()),
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn tiny_is_seed_deterministic() {
        let spec = ArchSpec::new("tiny", &[1, 8, 8], 4);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = build_model(&spec, 2).unwrap();
        let d = build_model(&spec, 1).unwrap();
        assert!(c.params().iter().zip(d.params()).any(|(x, y)| x.value != y.value));
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        for name in ["tiny", "vgg-mini"] {
            let spec = ArchSpec::new(name, &[1, 8, 8], 5);
            let m = build_model(&spec, 3).unwrap();
            let out = m.forward(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
            assert_eq!(out.shape(), &[2, 5]);
            assert!(out.is_finite());
        }
    }

    #[test]
    fn unknown_and_incompatible() {
        assert!(matches!(
            build_model(&ArchSpec::new("lenet", &[1, 8, 8], 2), 0),
            Err(Error::UnknownArchitecture(_))
        ));
        assert!(matches!(
            build_model(&ArchSpec::new("tiny", &[1, 6, 6], 2), 0),
            Err(Error::IncompatibleInput { .. })
        ));
        assert!(matches!(
            build_model(&ArchSpec::new("resnet18", &[3, 8], 2), 0),
            Err(Error::IncompatibleInput { .. })
        ));
    }

    #[test]
    fn unit_counts() {
        let vgg = build_model(&ArchSpec::new("vgg16", &[3, 32, 32], 10).with_width(4), 0).unwrap();
        assert_eq!(vgg.unit_count(), 16);
        let res = build_model(&ArchSpec::new("resnet18", &[3, 32, 32], 10).with_width(4), 0).unwrap();
        assert_eq!(res.unit_count(), 6);
    }
}
