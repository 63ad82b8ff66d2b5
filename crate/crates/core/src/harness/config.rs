use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, DecoderConfig, ShadowConfig, StrategyKind};
use crate::defense::{DefenseKind, DefenseParams, StageConfig};
use crate::error::{Error, Result};
use crate::harness::datasets::DatasetSpec;
use crate::nn::{ArchSpec, SgdConfig, SplitPlan};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Toy,
    Paper,
}

/// Architecture choice; the input shape and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl ArchConfig {
    pub fn spec(&self, data: &DatasetSpec) -> ArchSpec {
        let classes = if data.name == "cifar10-subset" { 10 } else { data.classes };
        let shape = if data.name == "cifar10-subset" { vec![3, 32, 32] } else { data.shape.clone() };
        let spec = ArchSpec::new(&self.name, &shape, classes);
        match self.width {
            Some(w) => spec.with_width(w),
            None => spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    /// Kind used by the `train` and `attack` verbs.
    pub kind: DefenseKind,
    #[serde(default)]
    pub params: DefenseParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub strategies: Vec<StrategyKind>,
    #[serde(flatten)]
    pub config: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub arch: ArchConfig,
    pub h_values: Vec<usize>,
    pub t_values: Vec<usize>,
    /// Seeds whose medians form the reported grid.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySection {
    pub batch: usize,
    pub repeats: usize,
    /// Ensemble size compared against a single network.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Eval images shown per mosaic row.
    pub mosaic_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub dataset: DatasetSpec,
    pub arch: ArchConfig,
    pub split: SplitPlan,
    pub defense: DefenseSection,
    pub attack: AttackSection,
    pub sweep: SweepSection,
    pub latency: LatencySection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Desk-scale defaults: minutes on one CPU core.
    pub fn toy() -> Self {
        let optim = SgdConfig {
            lr: 0.02,
            momentum: 0.9,
            batch_size: 32,
            weight_decay: 0.0,
        };
        let stage = StageConfig { epochs: 10, optim };
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            master_seed: 1,
            dataset: DatasetSpec {
                classes: 8,
                ..DatasetSpec::default()
            },
            arch: ArchConfig {
                name: "tiny".into(),
                width: None,
            },
            split: SplitPlan::new(1, 1),
            defense: DefenseSection {
                kind: DefenseKind::Ensembler,
                params: DefenseParams {
                    n: 4,
                    p: 2,
                    train: stage,
                    stage3: stage,
                    ..DefenseParams::default()
                },
            },
            attack: AttackSection {
                strategies: vec![StrategyKind::Single, StrategyKind::Adaptive],
                config: AttackConfig {
                    shadow: ShadowConfig {
                        epochs: 10,
                        optim,
                        ..ShadowConfig::default()
                    },
                    decoder: DecoderConfig {
                        epochs: 20,
                        optim: SgdConfig { lr: 0.05, ..optim },
                        ..DecoderConfig::default()
                    },
                    parallel: false,
                },
            },
            sweep: SweepSection {
                arch: ArchConfig {
                    name: "vgg-mini".into(),
                    width: None,
                },
                h_values: vec![1, 2, 3],
                t_values: vec![0],
                seeds: vec![1, 2, 3],
            },
            latency: LatencySection {
                batch: 128,
                repeats: 5,
                n: 4,
            },
            output: OutputSection {
                dir: PathBuf::from("out"),
                mosaic_images: 8,
            },
        }
    }

    /// The published protocol (ResNet-18 on CIFAR-10, N=10, P=4). Schedules
    /// are not published, so the numbers are not expected to match.
    pub fn paper() -> Self {
        let optim = SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 128,
            weight_decay: 5e-4,
        };
        let stage = StageConfig { epochs: 20, optim };
        let mut cfg = Self::toy();
        cfg.dataset = DatasetSpec {
            name: "cifar10-subset".into(),
            root: Some(PathBuf::from("data/cifar-10-batches-bin")),
            samples: 50_000,
            shape: vec![3, 32, 32],
            classes: 10,
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.247, 0.243, 0.261],
            train_fraction: 0.5,
            aux_fraction: 0.3,
        };
        cfg.arch = ArchConfig {
            name: "resnet18".into(),
            width: None,
        };
        cfg.defense.params = DefenseParams {
            n: 10,
            p: 4,
            train: stage,
            stage3: stage,
            ..DefenseParams::default()
        };
        cfg.attack.config.shadow = ShadowConfig {
            epochs: 20,
            optim,
            ..ShadowConfig::default()
        };
        cfg.attack.config.decoder = DecoderConfig {
            epochs: 20,
            optim,
            ..DecoderConfig::default()
        };
        cfg.attack.config.parallel = true;
        cfg.sweep.arch = ArchConfig {
            name: "vgg16".into(),
            width: None,
        };
        cfg.sweep.h_values = vec![1, 2, 3, 4, 5, 6];
        cfg.sweep.t_values = vec![1, 2, 3];
        cfg.latency.n = 10;
        cfg
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Toy => Self::toy(),
            Scale::Paper => Self::paper(),
        }
    }

    pub fn arch_spec(&self) -> ArchSpec {
        self.arch.spec(&self.dataset)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for cfg in [ExperimentConfig::toy(), ExperimentConfig::paper()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{text}");
        }
    }

    #[test]
    fn unknown_schema_rejected() {
        let text = ExperimentConfig::toy().to_toml().unwrap().replace("schema_version = 1", "schema_version = 9");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
