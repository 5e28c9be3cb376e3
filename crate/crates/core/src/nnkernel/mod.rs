//! Minimal deterministic training engine.
//!
//! Every MAC layer runs three stages, each multiplying two operands: one is
//! quantized statically to 8-bit mantissas, the other dynamically with the
//! bit-width map of its category.
//!
//! | stage          | MAC                 | static (8 bit)       | dynamic      |
//! |----------------|---------------------|----------------------|--------------|
//! | `Forward`      | `A ⊛ W`             | activation           | weight       |
//! | `Backward`     | `dY ⊛ Wᵀ`           | activation gradient  | weight       |
//! | `WeightUpdate` | `A ⊛ dY`            | activation gradient  | activation   |

mod checkpoint;
mod model;
mod ops;
mod train;

use serde::{Deserialize, Serialize};

use crate::bfp::DataRole;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub(crate) use model::{entry_remap, full_batch_layout};
pub use model::{BatchOutput, ForwardCache, Gradients, Layer, Model, QuantContext};
pub use train::{
    evaluate, sgd_step, train_epoch, Dataset, EpochMetrics, LrSchedule, NonFinitePolicy, TrainConfig,
    TrainState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    ReLU,
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    BatchNorm {
        channels: usize,
    },
    SoftmaxXEnt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub kind: LayerKind,
    /// Only MAC layers may be quantized.
    pub quantized: bool,
}

impl LayerDescriptor {
    pub fn conv2d(c_in: usize, c_out: usize, kernel: usize, padding: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                c_in,
                c_out,
                kernel,
                padding,
                stride,
            },
            quantized: true,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self {
            kind: LayerKind::Linear {
                in_features,
                out_features,
            },
            quantized: true,
        }
    }

    fn plain(kind: LayerKind) -> Self {
        Self { kind, quantized: false }
    }

    pub fn relu() -> Self {
        Self::plain(LayerKind::ReLU)
    }

    pub fn max_pool(size: usize) -> Self {
        Self::plain(LayerKind::MaxPool { size })
    }

    pub fn avg_pool(size: usize) -> Self {
        Self::plain(LayerKind::AvgPool { size })
    }

    pub fn batch_norm(channels: usize) -> Self {
        Self::plain(LayerKind::BatchNorm { channels })
    }

    pub fn softmax_xent() -> Self {
        Self::plain(LayerKind::SoftmaxXEnt)
    }

    pub fn is_mac(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::SoftmaxXEnt => "softmax_xent",
        }
    }

    /// MAC geometry for a per-batch input shape `[N, ...]`; `None` for
    /// layers that perform no MACs or inputs of the wrong rank.
    pub fn mac_shape(&self, input_dims: &[usize]) -> Option<MacShape> {
        match self.kind {
            LayerKind::Conv2d {
                c_in,
                c_out,
                kernel,
                padding,
                stride,
            } => {
                if input_dims.len() != 4 {
                    return None;
                }
                Some(MacShape::Conv2d {
                    c_in,
                    c_out,
                    kernel,
                    padding,
                    stride,
                    h_in: input_dims[2],
                    w_in: input_dims[3],
                })
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(MacShape::Linear {
                in_features,
                out_features,
            }),
            _ => None,
        }
    }
}

/// Geometry of one MAC layer for a known input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacShape {
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
        h_in: usize,
        w_in: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl MacShape {
    pub fn output_hw(&self) -> (usize, usize) {
        match *self {
            MacShape::Conv2d {
                kernel,
                padding,
                stride,
                h_in,
                w_in,
                ..
            } => {
                let ho = (h_in + 2 * padding).saturating_sub(kernel) / stride.max(1) + 1;
                let wo = (w_in + 2 * padding).saturating_sub(kernel) / stride.max(1) + 1;
                (ho, wo)
            }
            MacShape::Linear { .. } => (1, 1),
        }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match *self {
            MacShape::Conv2d { c_in, c_out, kernel, .. } => vec![c_out, c_in, kernel, kernel],
            MacShape::Linear {
                in_features,
                out_features,
            } => vec![out_features, in_features],
        }
    }

    pub fn input_dims(&self, batch: usize) -> Vec<usize> {
        match *self {
            MacShape::Conv2d { c_in, h_in, w_in, .. } => vec![batch, c_in, h_in, w_in],
            MacShape::Linear { in_features, .. } => vec![batch, in_features],
        }
    }

    pub fn output_dims(&self, batch: usize) -> Vec<usize> {
        match *self {
            MacShape::Conv2d { c_out, .. } => {
                let (ho, wo) = self.output_hw();
                vec![batch, c_out, ho, wo]
            }
            MacShape::Linear { out_features, .. } => vec![batch, out_features],
        }
    }

    pub fn is_degenerate(&self) -> bool {
        match *self {
            MacShape::Conv2d {
                c_in,
                c_out,
                kernel,
                stride,
                h_in,
                w_in,
                padding,
            } => {
                c_in == 0
                    || c_out == 0
                    || kernel == 0
                    || stride == 0
                    || h_in == 0
                    || w_in == 0
                    || h_in + 2 * padding < kernel
                    || w_in + 2 * padding < kernel
            }
            MacShape::Linear {
                in_features,
                out_features,
            } => in_features == 0 || out_features == 0,
        }
    }

    /// MACs of one pass of each stage for a batch.
    pub fn macs(&self, batch: usize) -> u64 {
        let w: usize = self.weight_dims().iter().product();
        let (ho, wo) = self.output_hw();
        (w * ho * wo * batch) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Forward,
    Backward,
    WeightUpdate,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Forward, Stage::Backward, Stage::WeightUpdate];

    /// The two data roles multiplied in this stage.
    pub fn operands(self) -> [DataRole; 2] {
        match self {
            Stage::Forward => [DataRole::Activation, DataRole::Weight],
            Stage::Backward => [DataRole::ActivationGradient, DataRole::Weight],
            Stage::WeightUpdate => [DataRole::Activation, DataRole::ActivationGradient],
        }
    }

    fn index(self) -> usize {
        match self {
            Stage::Forward => 0,
            Stage::Backward => 1,
            Stage::WeightUpdate => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOperands {
    pub static_operand: DataRole,
    pub dynamic_operand: DataRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePolicy {
    pub forward: StageOperands,
    pub backward: StageOperands,
    pub weight_update: StageOperands,
}

impl Default for StagePolicy {
    fn default() -> Self {
        Self {
            forward: StageOperands {
                static_operand: DataRole::Activation,
                dynamic_operand: DataRole::Weight,
            },
            backward: StageOperands {
                static_operand: DataRole::ActivationGradient,
                dynamic_operand: DataRole::Weight,
            },
            weight_update: StageOperands {
                static_operand: DataRole::ActivationGradient,
                dynamic_operand: DataRole::Activation,
            },
        }
    }
}

impl StagePolicy {
    pub fn stage(&self, stage: Stage) -> StageOperands {
        match stage {
            Stage::Forward => self.forward,
            Stage::Backward => self.backward,
            Stage::WeightUpdate => self.weight_update,
        }
    }

    /// One static and one dynamic operand per stage, drawn from the stage's
    /// operands, and only weights or activations may be dynamic.
    pub fn validate(&self) -> Result<()> {
        for stage in Stage::ALL {
            let ops = self.stage(stage);
            let allowed = stage.operands();
            if ops.static_operand == ops.dynamic_operand
                || !allowed.contains(&ops.static_operand)
                || !allowed.contains(&ops.dynamic_operand)
            {
                return Err(Error::config(format!("invalid operand assignment {ops:?} for {stage:?}")));
            }
            if ops.dynamic_operand == DataRole::ActivationGradient {
                return Err(Error::config(format!(
                    "{stage:?}: activation gradients carry no bit-width map and cannot be dynamic"
                )));
            }
        }
        Ok(())
    }

    pub fn is_dynamic(&self, stage: Stage, role: DataRole) -> bool {
        self.stage(stage).dynamic_operand == role
    }

    /// Categories that need a bit-width map.
    pub fn dynamic_categories(&self) -> Vec<DataRole> {
        let mut cats: Vec<DataRole> = Stage::ALL.iter().map(|&s| self.stage(s).dynamic_operand).collect();
        cats.sort();
        cats.dedup();
        cats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Sensitivity-driven per-block maps.
    Dynamic,
    /// Dynamic operands fixed at one bit-width.
    StaticUniform(u8),
    /// No quantization at all.
    FullPrecision,
}

/// Per-stage tally of executed MACs and their operand modes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacAudit {
    pub macs: [u64; 3],
    /// MACs whose two operands were not exactly one static and one dynamic.
    pub violations: u64,
    /// MACs executed with quantization bypassed.
    pub bypassed: u64,
}

impl MacAudit {
    pub(crate) fn record(&mut self, stage: Stage, a: OperandMode, b: OperandMode, macs: u64) {
        self.macs[stage.index()] += macs;
        match (a, b) {
            (OperandMode::Bypass, OperandMode::Bypass) => self.bypassed += macs,
            (OperandMode::Static, OperandMode::Dynamic) | (OperandMode::Dynamic, OperandMode::Static) => {}
            _ => self.violations += macs,
        }
    }

    pub fn stage_macs(&self, stage: Stage) -> u64 {
        self.macs[stage.index()]
    }

    pub fn total(&self) -> u64 {
        self.macs.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OperandMode {
    Static,
    Dynamic,
    Bypass,
}
