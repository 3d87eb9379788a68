//! Static MAC, parameter and int8 peak-SRAM estimation.
//!
//! The network is a fixed stem, the searched stages, and a fixed head:
//!
//! * stem: 3×3 conv, stride 2, 16 channels, BN + ReLU6
//! * stage i: `layers` blocks sharing one [`StageConfig`]; only the first block
//!   applies the stage stride
//! * head: global average pooling followed by a dense classifier
//!
//! Counting conventions: BN contributes two parameters per channel and no MACs,
//! convolutions carry no bias, SE convolutions carry a bias, and every
//! elementwise add or scale (residual add, SE scale, pooling accumulate) counts
//! one MAC per element. Spatial sizes use SAME padding, `out = ceil(in / stride)`.
//! Activation memory is one byte per element.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{ArchitectureConfig, ConvBlock, SearchSpace, StageConfig};

pub const STEM_CHANNELS: u64 = 16;
pub const STEM_KERNEL: u64 = 3;
pub const STEM_STRIDE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub height: u64,
    pub width: u64,
    pub channels: u64,
}

impl TensorShape {
    pub const fn new(height: u64, width: u64, channels: u64) -> Self {
        Self { height, width, channels }
    }

    pub fn square(resolution: u64, channels: u64) -> Self {
        Self::new(resolution, resolution, channels)
    }

    pub fn elements(&self) -> u64 {
        self.height * self.width * self.channels
    }

    pub fn spatial(&self) -> u64 {
        self.height * self.width
    }

    fn is_degenerate(&self) -> bool {
        self.height == 0 || self.width == 0 || self.channels == 0
    }

    fn strided(&self, stride: u64, channels: u64) -> Self {
        Self::new(self.height.div_ceil(stride), self.width.div_ceil(stride), channels)
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub label: String,
    pub macs: u64,
    pub params: u64,
    pub in_bytes: u64,
    pub out_bytes: u64,
    /// Skip-connection source kept alive while this layer runs.
    pub resident_extra_bytes: u64,
}

impl LayerCost {
    pub fn resident_bytes(&self) -> u64 {
        self.in_bytes + self.out_bytes + self.resident_extra_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub total_macs: u64,
    pub total_params: u64,
    pub peak_sram_bytes: u64,
    /// int8 weights only, one byte per parameter.
    pub flash_bytes: u64,
    pub layers: Vec<LayerCost>,
}

/// One step of shape propagation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub label: String,
    pub input: TensorShape,
    pub output: TensorShape,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EstimateError {
    #[error("layer {label} would produce a degenerate tensor {shape}")]
    DegenerateShape { label: String, shape: TensorShape },
    #[error("stage {stage}: se enabled without se_ratio")]
    MissingSeRatio { stage: usize },
}

struct Layer {
    shape: LayerShape,
    macs: u64,
    params: u64,
    resident_extra: u64,
}

/// Accumulates layers in execution order.
struct Walker {
    layers: Vec<Layer>,
}

impl Walker {
    fn push(
        &mut self,
        label: String,
        input: TensorShape,
        output: TensorShape,
        macs: u64,
        params: u64,
        resident_extra: u64,
    ) -> Result<TensorShape, EstimateError> {
        if output.is_degenerate() {
            return Err(EstimateError::DegenerateShape { label, shape: output });
        }
        self.layers.push(Layer {
            shape: LayerShape { label, input, output },
            macs,
            params,
            resident_extra,
        });
        Ok(output)
    }

    fn block(
        &mut self,
        prefix: &str,
        stage: &StageConfig,
        stage_no: usize,
        input: TensorShape,
        stride: u64,
    ) -> Result<TensorShape, EstimateError> {
        let c_in = input.channels;
        let c_out = stage.out_channels as u64;
        let skip = stage.skip && stride == 1 && c_in == c_out;
        let held = if skip { input.elements() } else { 0 };
        let mut x = input;

        if stage.conv_block == ConvBlock::MbConv {
            let c_exp = c_in * stage.expansion as u64;
            let out = TensorShape::new(x.height, x.width, c_exp);
            x = self.push(
                format!("{prefix}.expand"),
                x,
                out,
                c_in * c_exp * out.spatial(),
                c_in * c_exp + 2 * c_exp,
                held,
            )?;
        }

        let c = x.channels;
        let k2 = (stage.kernel as u64).pow(2);
        let out = x.strided(stride, c);
        x = self.push(
            format!("{prefix}.dwconv"),
            x,
            out,
            k2 * c * out.spatial(),
            k2 * c + 2 * c,
            held,
        )?;

        if stage.se_enabled {
            let ratio = stage.se_ratio.ok_or(EstimateError::MissingSeRatio { stage: stage_no })?;
            let reduced = ((c as f64 * ratio).floor() as u64).max(1);
            let fc = c * reduced + reduced * c;
            x = self.push(
                format!("{prefix}.se"),
                x,
                x,
                2 * x.elements() + fc,
                fc + reduced + c,
                held,
            )?;
        }

        let out = TensorShape::new(x.height, x.width, c_out);
        x = self.push(
            format!("{prefix}.pwconv"),
            x,
            out,
            c * c_out * out.spatial(),
            c * c_out + 2 * c_out,
            held,
        )?;

        if skip {
            x = self.push(format!("{prefix}.add"), x, x, x.elements(), 0, held)?;
        }
        Ok(x)
    }
}

fn walk(
    arch: &ArchitectureConfig,
    input: TensorShape,
    num_classes: u64,
) -> Result<Vec<Layer>, EstimateError> {
    if input.is_degenerate() {
        return Err(EstimateError::DegenerateShape { label: "input".into(), shape: input });
    }
    let mut w = Walker { layers: Vec::new() };

    let stem_out = input.strided(STEM_STRIDE, STEM_CHANNELS);
    let stem_weights = STEM_KERNEL * STEM_KERNEL * input.channels * STEM_CHANNELS;
    let mut x = w.push(
        "stem.conv".into(),
        input,
        stem_out,
        stem_weights * stem_out.spatial(),
        stem_weights + 2 * STEM_CHANNELS,
        0,
    )?;

    for (i, stage) in arch.stages.iter().enumerate() {
        for j in 0..stage.layers {
            let stride = if j == 0 { stage.stride as u64 } else { 1 };
            let prefix = format!("stage{}.block{}", i + 1, j + 1);
            x = w.block(&prefix, stage, i + 1, x, stride)?;
        }
    }

    let pooled = TensorShape::new(1, 1, x.channels);
    x = w.push("head.pool".into(), x, pooled, x.elements(), 0, 0)?;
    let logits = TensorShape::new(1, 1, num_classes);
    w.push(
        "head.fc".into(),
        x,
        logits,
        x.channels * num_classes,
        x.channels * num_classes + num_classes,
        0,
    )?;
    Ok(w.layers)
}

/// Shape of every layer from stem to classifier, in execution order.
pub fn propagate(
    arch: &ArchitectureConfig,
    input: TensorShape,
    num_classes: u64,
) -> Result<Vec<LayerShape>, EstimateError> {
    Ok(walk(arch, input, num_classes)?.into_iter().map(|l| l.shape).collect())
}

pub fn estimate(
    arch: &ArchitectureConfig,
    input: TensorShape,
    num_classes: u64,
) -> Result<ResourceEstimate, EstimateError> {
    let layers: Vec<LayerCost> = walk(arch, input, num_classes)?
        .into_iter()
        .map(|l| LayerCost {
            in_bytes: l.shape.input.elements(),
            out_bytes: l.shape.output.elements(),
            label: l.shape.label,
            macs: l.macs,
            params: l.params,
            resident_extra_bytes: l.resident_extra,
        })
        .collect();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    let total_params = layers.iter().map(|l| l.params).sum();
    let peak_sram_bytes = layers.iter().map(LayerCost::resident_bytes).max().unwrap_or(0);
    Ok(ResourceEstimate {
        total_macs,
        total_params,
        peak_sram_bytes,
        flash_bytes: total_params,
        layers,
    })
}

/// Estimate at the space's input resolution (RGB) and class count.
pub fn estimate_in_space(
    arch: &ArchitectureConfig,
    space: &SearchSpace,
) -> Result<ResourceEstimate, EstimateError> {
    estimate(arch, TensorShape::square(space.input_resolution as u64, 3), space.num_classes as u64)
}

/// Hard deployment limits applied before any training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    pub macs_min: u64,
    pub macs_max: u64,
    pub sram_limit_bytes: u64,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self { macs_min: 70_000_000, macs_max: 350_000_000, sram_limit_bytes: 320 * 1024 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateViolation {
    MacsLow { current: u64, min: u64, max: u64 },
    MacsHigh { current: u64, min: u64, max: u64 },
    Sram { current: u64, limit: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "violations", rename_all = "snake_case")]
pub enum GateVerdict {
    Accept,
    Reject(Vec<GateViolation>),
}

impl GateVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, GateVerdict::Accept)
    }
}

/// Applies the MAC range and SRAM limit; all violated bounds are reported.
/// Bounds are inclusive.
pub fn check_constraints(est: &ResourceEstimate, limits: &ConstraintSet) -> GateVerdict {
    let mut violations = Vec::new();
    let (min, max) = (limits.macs_min, limits.macs_max);
    if est.total_macs < min {
        violations.push(GateViolation::MacsLow { current: est.total_macs, min, max });
    }
    if est.total_macs > max {
        violations.push(GateViolation::MacsHigh { current: est.total_macs, min, max });
    }
    if est.peak_sram_bytes > limits.sram_limit_bytes {
        violations.push(GateViolation::Sram {
            current: est.peak_sram_bytes,
            limit: limits.sram_limit_bytes,
        });
    }
    if violations.is_empty() {
        GateVerdict::Accept
    } else {
        GateVerdict::Reject(violations)
    }
}
