//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{BinConfig, MAX_BIN_LEN};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::optim::OptimizerKind;
use crate::sim::CodecSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub codec: CodecAssignment,
    pub optimizer: OptimizerConfig,
    pub learners: usize,
    pub global_batch: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Write `rg_hist_epoch<k>.csv` after every epoch.
    #[serde(default)]
    pub histograms: bool,
    /// Per-step |residue| / |dW| percentiles (one selection per layer per step).
    #[serde(default = "yes")]
    pub percentiles: bool,
    /// Compare weights across ranks after every step.
    #[serde(default = "yes")]
    pub verify_ranks: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Fc {
        out: usize,
    },
    Conv5x5 {
        out_maps: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Relu,
    Maxpool2x2,
    SoftmaxXent,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        dir: PathBuf,
        /// Keep the first `train_limit` training images.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
        /// Subtract the per-pixel training mean.
        #[serde(default)]
        center: bool,
    },
    Gaussians {
        classes: usize,
        dim: usize,
        train: usize,
        test: usize,
        #[serde(default = "default_separation")]
        separation: f32,
        #[serde(default)]
        seed: u64,
    },
}

fn default_separation() -> f32 {
    4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecConfig {
    #[serde(alias = "identity")]
    None,
    Adacomp {
        bin_len: usize,
        #[serde(default = "default_scale_factor")]
        scale_factor: f32,
    },
    Ls {
        bin_len: usize,
    },
    Topk {
        fraction: f64,
    },
    Onebit,
}

fn default_scale_factor() -> f32 {
    BinConfig::DEFAULT_SCALE_FACTOR
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecAssignment {
    #[serde(default = "default_fc")]
    pub fc: CodecConfig,
    #[serde(default = "default_conv")]
    pub conv: CodecConfig,
}

fn default_fc() -> CodecConfig {
    CodecConfig::Adacomp {
        bin_len: 500,
        scale_factor: BinConfig::DEFAULT_SCALE_FACTOR,
    }
}

fn default_conv() -> CodecConfig {
    CodecConfig::Adacomp {
        bin_len: 50,
        scale_factor: BinConfig::DEFAULT_SCALE_FACTOR,
    }
}

impl Default for CodecAssignment {
    fn default() -> Self {
        Self {
            fc: default_fc(),
            conv: default_conv(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f32,
        #[serde(default = "default_momentum")]
        momentum: f32,
    },
    Adam {
        lr: f32,
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_eps")]
        eps: f32,
    },
}

fn default_momentum() -> f32 {
    0.9
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl OptimizerConfig {
    pub fn kind(&self) -> OptimizerKind {
        match *self {
            OptimizerConfig::Sgd { lr, momentum } => OptimizerKind::SgdMomentum { lr, momentum },
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            },
        }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("{field}: {msg}"))
}

impl CodecConfig {
    pub fn to_spec(&self, field: &str) -> Result<CodecSpec> {
        let check_lt = |bin_len: usize| {
            if bin_len == 0 || bin_len > MAX_BIN_LEN {
                Err(invalid(
                    &format!("{field}.bin_len"),
                    format!("L_T must be between 1 and {MAX_BIN_LEN}, got {bin_len}"),
                ))
            } else {
                Ok(())
            }
        };
        Ok(match *self {
            CodecConfig::None => CodecSpec::Identity,
            CodecConfig::Adacomp {
                bin_len,
                scale_factor,
            } => {
                check_lt(bin_len)?;
                let cfg = BinConfig::with_scale_factor(bin_len, scale_factor)
                    .map_err(|e| invalid(&format!("{field}.scale_factor"), e))?;
                CodecSpec::AdaComp(cfg)
            }
            CodecConfig::Ls { bin_len } => {
                check_lt(bin_len)?;
                CodecSpec::LocalSelection { bin_len }
            }
            CodecConfig::Topk { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(invalid(
                        &format!("{field}.fraction"),
                        format!("must lie in (0, 1], got {fraction}"),
                    ));
                }
                CodecSpec::TopPercent { fraction }
            }
            CodecConfig::Onebit => CodecSpec::OneBit,
        })
    }

    /// Replaces the bin length of binned codecs; others are unchanged.
    pub fn with_bin_len(self, value: usize) -> Self {
        match self {
            CodecConfig::Adacomp { scale_factor, .. } => CodecConfig::Adacomp {
                bin_len: value,
                scale_factor,
            },
            CodecConfig::Ls { .. } => CodecConfig::Ls { bin_len: value },
            other => other,
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON document. Syntax and unknown-key errors carry the
    /// line and column reported by the parser.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative dataset directory is resolved
    /// against the file's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let DatasetConfig::Mnist { dir, .. } = &mut cfg.dataset {
            if dir.is_relative() {
                if let Some(parent) = path.parent() {
                    *dir = parent.join(&*dir);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.learners == 0 {
            return Err(invalid("learners", "must be at least 1"));
        }
        if self.global_batch == 0 || !self.global_batch.is_multiple_of(self.learners) {
            return Err(invalid(
                "global_batch",
                format!(
                    "must be a positive multiple of learners ({}), got {}",
                    self.learners, self.global_batch
                ),
            ));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        self.codec.fc.to_spec("codec.fc")?;
        self.codec.conv.to_spec("codec.conv")?;
        self.optimizer.kind().validate().map_err(|_| {
            invalid(
                "optimizer",
                "learning rate must be positive and betas/momentum in [0, 1)",
            )
        })?;
        match &self.dataset {
            DatasetConfig::Gaussians {
                classes,
                dim,
                train,
                test,
                ..
            } => {
                if *classes < 2 || dim < classes {
                    return Err(invalid("dataset.dim", "needs 2 <= classes <= dim"));
                }
                if *train < self.global_batch {
                    return Err(invalid("dataset.train", "must be at least global_batch"));
                }
                if *test == 0 {
                    return Err(invalid("dataset.test", "must be positive"));
                }
            }
            DatasetConfig::Mnist { train_limit, .. } => {
                if train_limit.is_some_and(|n| n < self.global_batch) {
                    return Err(invalid(
                        "dataset.train_limit",
                        "must be at least global_batch",
                    ));
                }
            }
        }
        let specs = self.layer_specs()?;
        let classes = match self.dataset {
            DatasetConfig::Mnist { .. } => 10,
            DatasetConfig::Gaussians { classes, .. } => classes,
        };
        if let Some(LayerSpec::SoftmaxXent { classes: outputs }) = specs.last() {
            if *outputs != classes {
                return Err(invalid(
                    "model.layers",
                    format!(
                        "softmax_xent sees {outputs} outputs but the dataset has {classes} classes"
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Resolves layer dimensions from the input shape.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let mut shape = self.model.input.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(invalid("model.input", format!("bad shape {shape:?}")));
        }
        let mut specs = Vec::with_capacity(self.model.layers.len());
        for (i, layer) in self.model.layers.iter().enumerate() {
            let len: usize = shape.iter().product();
            let spec = match *layer {
                LayerConfig::Fc { out } => LayerSpec::FullyConnected {
                    inputs: len,
                    outputs: out,
                },
                LayerConfig::Conv5x5 { out_maps, stride } => LayerSpec::Conv5x5 {
                    in_maps: shape[0],
                    out_maps,
                    stride,
                },
                LayerConfig::Relu => LayerSpec::Relu,
                LayerConfig::Maxpool2x2 => LayerSpec::MaxPool2x2,
                LayerConfig::SoftmaxXent => LayerSpec::SoftmaxXent { classes: len },
            };
            shape = spec
                .output_shape(&shape)
                .map_err(|e| invalid(&format!("model.layers[{i}]"), e))?;
            specs.push(spec);
        }
        if !matches!(specs.last(), Some(LayerSpec::SoftmaxXent { .. })) {
            return Err(invalid(
                "model.layers",
                "the last layer must be softmax_xent",
            ));
        }
        Ok(specs)
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(&self.model.input, &self.layer_specs()?, self.seed)
    }
}
