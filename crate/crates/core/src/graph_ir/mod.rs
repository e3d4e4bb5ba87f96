//! Layer-group graph IR with first-class skip edges.
//!
//! A [`NetworkGraph`] is a main chain of [`LayerGroup`]s in topological order
//! plus a list of [`SkipEdge`]s. Every non-projection layer consumes the output
//! of the previous non-projection layer; an `Add` layer additionally consumes
//! the skip operand delivered by the one skip edge that sinks into it. The 1x1
//! convolution of a `Projection1x1` skip is stored in the layer list right
//! before its `Add` but sits off the main chain.
//!
//! Batch normalization is always folded into the preceding convolution, so a
//! `Conv` layer-group stands for conv + BN.

mod builders;
mod validate;

pub use builders::{
    build_basic_block, build_quartznet, build_residual_mlp, build_resnet_basic,
    build_resnet_bottleneck, QUARTZNET_KERNELS,
};
pub use validate::{validate, Violation};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkipId(pub u32);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {}", self.0)
    }
}

impl fmt::Display for SkipId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "skip {}", self.0)
    }
}

/// Height x width x channels of one feature map (per sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TensorShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidParams(format!(
                "tensor dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self { height, width, channels })
    }

    /// A flat feature vector, stored as 1x1xN.
    pub fn vector(features: usize) -> Result<Self> {
        Self::new(1, 1, features)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn elements(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_valid(&self) -> bool {
        self.height >= 1 && self.width >= 1 && self.channels >= 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl FromStr for TensorShape {
    type Err = Error;

    /// Parses `HxWxC`.
    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .trim()
            .split(['x', 'X'])
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidParams(format!("cannot parse shape {s:?}, expected HxWxC")))?;
        match dims[..] {
            [h, w, c] => TensorShape::new(h, w, c),
            _ => Err(Error::InvalidParams(format!("cannot parse shape {s:?}, expected HxWxC"))),
        }
    }
}

/// Signed fixed-point format `ap_fixed<total_bits, integer_bits>`; the integer
/// bits include the sign bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Precision {
    pub total_bits: u32,
    pub integer_bits: u32,
}

impl Precision {
    pub const FIXED_8_3: Precision = Precision { total_bits: 8, integer_bits: 3 };
    pub const FIXED_16_6: Precision = Precision { total_bits: 16, integer_bits: 6 };

    pub fn new(total_bits: u32, integer_bits: u32) -> Result<Self> {
        if !(2..=32).contains(&total_bits) || integer_bits < 1 || integer_bits >= total_bits {
            return Err(Error::InvalidParams(format!(
                "fixed-point precision needs 2 <= total_bits <= 32 and 1 <= integer_bits < total_bits, got <{total_bits},{integer_bits}>"
            )));
        }
        Ok(Self { total_bits, integer_bits })
    }

    pub fn fractional_bits(&self) -> u32 {
        self.total_bits - self.integer_bits
    }

    /// Distance between adjacent representable values.
    pub fn step(&self) -> f64 {
        (-(self.fractional_bits() as f64)).exp2()
    }

    pub fn max_value(&self) -> f64 {
        ((self.integer_bits - 1) as f64).exp2() - self.step()
    }

    pub fn min_value(&self) -> f64 {
        -((self.integer_bits - 1) as f64).exp2()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.total_bits, self.integer_bits)
    }
}

impl FromStr for Precision {
    type Err = Error;

    /// Accepts `8,3`, `<8,3>` or `ap_fixed<8,3>`.
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s
            .trim()
            .trim_start_matches("ap_fixed")
            .trim_start_matches('<')
            .trim_end_matches('>');
        let mut parts = trimmed.split(',').map(str::trim);
        let parse = |p: Option<&str>| -> Result<u32> {
            p.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidParams(format!("cannot parse precision {s:?}")))
        };
        let total = parse(parts.next())?;
        let integer = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::InvalidParams(format!("cannot parse precision {s:?}")));
        }
        Precision::new(total, integer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LayerKind {
    /// Graph input; the single source of every graph.
    Input,
    /// Same-padded convolution with BN folded in. `kernel` is odd.
    Conv { kernel: usize, out_channels: usize, stride: usize },
    Dense { out_features: usize },
    Relu,
    Add,
    /// Marker for a batch norm already folded into the preceding conv.
    BatchNormFolded,
    Quantize { precision: Precision },
}

impl LayerKind {
    /// Conv and Dense layers own weights; they delimit layer-groups.
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Add => "add",
            LayerKind::BatchNormFolded => "batch_norm_folded",
            LayerKind::Quantize { .. } => "quantize",
        }
    }

    /// Output shape for a given input shape, or a description of why the
    /// parameters are invalid.
    pub fn output_shape(&self, input: TensorShape) -> std::result::Result<TensorShape, String> {
        match *self {
            LayerKind::Conv { kernel, out_channels, stride } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return Err(format!("conv kernel must be odd and positive, got {kernel}"));
                }
                if stride == 0 {
                    return Err("conv stride must be >= 1".into());
                }
                if out_channels == 0 {
                    return Err("conv out_channels must be >= 1".into());
                }
                Ok(TensorShape {
                    height: input.height.div_ceil(stride),
                    width: input.width.div_ceil(stride),
                    channels: out_channels,
                })
            }
            LayerKind::Dense { out_features } => {
                if out_features == 0 {
                    return Err("dense out_features must be >= 1".into());
                }
                Ok(TensorShape { height: 1, width: 1, channels: out_features })
            }
            LayerKind::Quantize { precision } => {
                Precision::new(precision.total_bits, precision.integer_bits)
                    .map_err(|e| e.to_string())?;
                Ok(input)
            }
            LayerKind::Input | LayerKind::Relu | LayerKind::Add | LayerKind::BatchNormFolded => {
                Ok(input)
            }
        }
    }

    /// Number of trainable weights (excluding bias) for a given input shape.
    pub fn weight_count(&self, input: TensorShape) -> usize {
        match *self {
            LayerKind::Conv { kernel, out_channels, .. } => {
                kernel * kernel * input.channels * out_channels
            }
            LayerKind::Dense { out_features } => input.elements() * out_features,
            _ => 0,
        }
    }

    /// Multiply-accumulates for one sample. Taps that can never touch the
    /// feature map (a 33-wide kernel on a height-1 map) are not counted.
    pub fn macs(&self, input: TensorShape, output: TensorShape) -> u64 {
        match *self {
            LayerKind::Conv { kernel, .. } => {
                let kh = kernel.min(input.height) as u64;
                let kw = kernel.min(input.width) as u64;
                output.pixels() as u64 * kh * kw * input.channels as u64 * output.channels as u64
            }
            LayerKind::Dense { out_features } => input.elements() as u64 * out_features as u64,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub id: LayerId,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(rename = "in_shape")]
    pub input_shape: TensorShape,
    #[serde(rename = "out_shape")]
    pub output_shape: TensorShape,
    /// Residual unit this layer was built in, if any. Survives skip removal so
    /// hardware estimators can still count blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    Identity,
    /// 1x1 convolution on the skip path; `conv` names its layer-group.
    Projection1x1 { out_channels: usize, stride: usize, conv: LayerId },
}

impl SkipKind {
    pub fn projection_conv(&self) -> Option<LayerId> {
        match self {
            SkipKind::Identity => None,
            SkipKind::Projection1x1 { conv, .. } => Some(*conv),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEdge {
    pub id: SkipId,
    pub source: LayerId,
    /// Always an `Add` layer.
    pub sink: LayerId,
    /// Parametric layer-groups bypassed on the main chain.
    pub span: usize,
    pub kind: SkipKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkGraph {
    name: String,
    layers: Vec<LayerGroup>,
    skips: Vec<SkipEdge>,
}

impl NetworkGraph {
    /// Assembles a graph without checking it; run [`validate`] on anything
    /// that did not come from a builder or transform.
    pub fn from_parts(name: impl Into<String>, layers: Vec<LayerGroup>, skips: Vec<SkipEdge>) -> Self {
        Self { name: name.into(), layers, skips }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerGroup] {
        &self.layers
    }

    pub fn skips(&self) -> &[SkipEdge] {
        &self.skips
    }

    pub fn into_parts(self) -> (String, Vec<LayerGroup>, Vec<SkipEdge>) {
        (self.name, self.layers, self.skips)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerGroup> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn position(&self, id: LayerId) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn positions(&self) -> HashMap<LayerId, usize> {
        self.layers.iter().enumerate().map(|(i, l)| (l.id, i)).collect()
    }

    /// Layers that are the 1x1 conv of some projection skip.
    pub fn projection_convs(&self) -> BTreeSet<LayerId> {
        self.skips.iter().filter_map(|s| s.kind.projection_conv()).collect()
    }

    /// Indices (into `layers`) of the main chain, in order.
    pub fn main_chain(&self) -> Vec<usize> {
        let proj = self.projection_convs();
        (0..self.layers.len()).filter(|&i| !proj.contains(&self.layers[i].id)).collect()
    }

    /// The main-chain layer feeding `id`, if `id` is on the main chain and is
    /// not the input.
    pub fn main_predecessor(&self, id: LayerId) -> Option<LayerId> {
        let chain = self.main_chain();
        let at = chain.iter().position(|&i| self.layers[i].id == id)?;
        at.checked_sub(1).map(|p| self.layers[chain[p]].id)
    }

    pub fn skip_into(&self, sink: LayerId) -> Option<&SkipEdge> {
        self.skips.iter().find(|s| s.sink == sink)
    }

    /// Parametric main-chain layers strictly between `source` and `sink`.
    pub fn span_between(&self, source: LayerId, sink: LayerId) -> Option<usize> {
        let proj = self.projection_convs();
        let s = self.position(source)?;
        let t = self.position(sink)?;
        if s >= t {
            return None;
        }
        Some(
            self.layers[s + 1..t]
                .iter()
                .filter(|l| !proj.contains(&l.id) && l.kind.is_parametric())
                .count(),
        )
    }

    pub fn input_shape(&self) -> Option<TensorShape> {
        self.layers.first().map(|l| l.input_shape)
    }

    pub fn output_shape(&self) -> Option<TensorShape> {
        self.main_chain().last().map(|&i| self.layers[i].output_shape)
    }

    pub fn max_span(&self) -> usize {
        self.skips.iter().map(|s| s.span).max().unwrap_or(0)
    }

    pub fn count_kind(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(&l.kind)).count()
    }

    pub fn conv_count(&self) -> usize {
        self.count_kind(|k| matches!(k, LayerKind::Conv { .. }))
    }

    pub fn next_layer_id(&self) -> LayerId {
        LayerId(self.layers.iter().map(|l| l.id.0 + 1).max().unwrap_or(0))
    }

    pub fn next_skip_id(&self) -> SkipId {
        SkipId(self.skips.iter().map(|s| s.id.0 + 1).max().unwrap_or(0))
    }

    /// Re-sorts skips input-to-output and recomputes their spans. Used by the
    /// transforms after editing the layer list.
    pub(crate) fn normalize(mut self) -> Self {
        let pos = self.positions();
        let key = |s: &SkipEdge| {
            (
                pos.get(&s.source).copied().unwrap_or(usize::MAX),
                pos.get(&s.sink).copied().unwrap_or(usize::MAX),
            )
        };
        self.skips.sort_by_key(key);
        let spans: Vec<usize> = self
            .skips
            .iter()
            .map(|s| self.span_between(s.source, s.sink).unwrap_or(0))
            .collect();
        for (skip, span) in self.skips.iter_mut().zip(spans) {
            skip.span = span;
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
