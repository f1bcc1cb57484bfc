//! Network intermediate representation.
//!
//! A [`NetworkIR`] is an ordered list of layers, each carrying its own
//! parameter tensors. Networks are treated as immutable values: surgery
//! produces a new network.

mod builder;
mod count;
mod io;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::FormatError;
use crate::tensor::Tensor;

pub use builder::NetworkBuilder;
pub use count::{count_flops, count_params, CountReport, LayerCount, Reduction, FLOP_CONVENTION};
pub use io::{load_model, save_model};
pub use validate::{validate, Violation, ViolationKind};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid network: {}", summarize(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{layer}`: {reason}")]
    BadLayer { layer: String, reason: String },
}

fn summarize(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Channels x height x width of one activation (batch dimension excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn out_dim(&self, size: usize) -> Option<usize> {
        window_out(size, self.kernel, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn out_dim(&self, size: usize) -> Option<usize> {
        window_out(size, self.window, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

fn window_out(size: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || window == 0 || size + 2 * padding < window {
        return None;
    }
    Some((size + 2 * padding - window) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d(ConvSpec),
    Relu,
    MaxPool2d(PoolSpec),
    /// Max-feature-map block. The spec describes the internal convolution,
    /// whose `out_channels` is `2 * o`; the block emits `o` channels.
    Mfm(ConvSpec),
    Gap,
    Linear(LinearSpec),
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d(_) => "maxpool2d",
            LayerKind::Mfm(_) => "mfm",
            LayerKind::Gap => "gap",
            LayerKind::Linear(_) => "linear",
        }
    }

    /// Convolution spec for conv and MFM layers.
    pub fn conv(&self) -> Option<&ConvSpec> {
        match self {
            LayerKind::Conv2d(c) | LayerKind::Mfm(c) => Some(c),
            _ => None,
        }
    }

    /// True for layers whose output channels are filters that can be pruned.
    pub fn is_filter_layer(&self) -> bool {
        matches!(self, LayerKind::Conv2d(_) | LayerKind::Mfm(_))
    }

    /// Layers that act on each channel independently.
    pub fn is_channelwise(&self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::MaxPool2d(_))
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerKind::Conv2d(c) | LayerKind::Mfm(c) => Some(c.weight_shape()),
            LayerKind::Linear(l) => Some(vec![l.out_features, l.in_features]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match self {
            LayerKind::Conv2d(c) | LayerKind::Mfm(c) if c.bias => Some(c.out_channels),
            LayerKind::Linear(l) if l.bias => Some(l.out_features),
            _ => None,
        }
    }

    /// Output shape for a given input, or a reason the input is rejected.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3, String> {
        match self {
            LayerKind::Conv2d(c) | LayerKind::Mfm(c) => {
                if input.c != c.in_channels {
                    return Err(format!(
                        "expects {} input channels, receives {}",
                        c.in_channels, input.c
                    ));
                }
                let (h, w) = c
                    .out_dim(input.h)
                    .zip(c.out_dim(input.w))
                    .ok_or_else(|| format!("kernel {} does not fit input {input}", c.kernel))?;
                let out = match self {
                    LayerKind::Mfm(_) => c.out_channels / 2,
                    _ => c.out_channels,
                };
                Ok(Shape3::new(out, h, w))
            }
            LayerKind::Relu => Ok(input),
            LayerKind::MaxPool2d(p) => {
                if p.padding >= p.window {
                    return Err("pool padding must be smaller than the window".into());
                }
                let (h, w) = p
                    .out_dim(input.h)
                    .zip(p.out_dim(input.w))
                    .ok_or_else(|| format!("window {} does not fit input {input}", p.window))?;
                Ok(Shape3::new(input.c, h, w))
            }
            LayerKind::Gap => Ok(Shape3::new(input.c, 1, 1)),
            LayerKind::Linear(l) => {
                if input.len() != l.in_features {
                    return Err(format!(
                        "expects {} input features, receives {}",
                        l.in_features,
                        input.len()
                    ));
                }
                Ok(Shape3::new(l.out_features, 1, 1))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Group id linking a 1x1 MFM block with the k x k MFM block after it.
    pub group: Option<u32>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            group: None,
            weight: None,
            bias: None,
        }
    }

    /// Bitwise comparison of spec and parameters.
    pub fn bit_eq(&self, other: &Layer) -> bool {
        fn opt_eq(a: &Option<Tensor>, b: &Option<Tensor>) -> bool {
            match (a, b) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            }
        }
        self.name == other.name
            && self.kind == other.kind
            && self.group == other.group
            && opt_eq(&self.weight, &other.weight)
            && opt_eq(&self.bias, &other.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkIR {
    pub name: String,
    pub primary_task: Option<String>,
    pub input_shape: Shape3,
    pub layers: Vec<Layer>,
    pub metadata: BTreeMap<String, String>,
}

impl NetworkIR {
    pub fn layer_index(&self, name: &str) -> Result<usize, NetError> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| NetError::UnknownLayer(name.to_string()))
    }

    pub fn layer(&self, name: &str) -> Result<&Layer, NetError> {
        Ok(&self.layers[self.layer_index(name)?])
    }

    /// Activation shapes after every layer, starting from `input`.
    pub fn shapes_from(&self, input: Shape3) -> Result<Vec<Shape3>, NetError> {
        let mut cur = input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = l.kind.output_shape(cur).map_err(|reason| NetError::BadLayer {
                layer: l.name.clone(),
                reason,
            })?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn shapes(&self) -> Result<Vec<Shape3>, NetError> {
        self.shapes_from(self.input_shape)
    }

    pub fn output_shape(&self) -> Result<Shape3, NetError> {
        Ok(self.shapes()?.last().copied().unwrap_or(self.input_shape))
    }

    /// Names of conv and MFM layers, bottom to top.
    pub fn filter_layers(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_filter_layer())
            .map(|l| l.name.clone())
            .collect()
    }

    /// Index of the layer whose output is read as layer `idx`'s activation map:
    /// the layer itself, or the ReLU directly after it.
    pub fn response_index(&self, idx: usize) -> usize {
        match self.layers.get(idx + 1) {
            Some(next) if next.kind == LayerKind::Relu => idx + 1,
            _ => idx,
        }
    }

    /// Indices of the two MFM layers tagged with `group`, in order.
    pub fn group_members(&self, group: u32) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.group == Some(group))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn groups(&self) -> Vec<u32> {
        let mut g: Vec<u32> = self.layers.iter().filter_map(|l| l.group).collect();
        g.dedup();
        g
    }

    /// Bitwise comparison of every spec and parameter.
    pub fn bit_eq(&self, other: &NetworkIR) -> bool {
        self.name == other.name
            && self.primary_task == other.primary_task
            && self.input_shape == other.input_shape
            && self.metadata == other.metadata
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bit_eq(b))
    }

    /// Copy keeping layers `0..=idx`.
    pub fn truncated(&self, idx: usize) -> NetworkIR {
        NetworkIR {
            layers: self.layers[..=idx.min(self.layers.len().saturating_sub(1))].to_vec(),
            ..self.clone()
        }
    }

    /// Appends a GAP layer and a linear layer with the given parameters
    /// (`out x in` weight, `out` bias) on top of the current output.
    pub fn push_head(&mut self, weight: Vec<f32>, bias: Vec<f32>) -> Result<(), NetError> {
        let c = self.output_shape()?.c;
        let out = bias.len();
        let unique = |base: &str| {
            let mut name = base.to_string();
            let mut k = 1;
            while self.layers.iter().any(|l| l.name == name) {
                k += 1;
                name = format!("{base}{k}");
            }
            name
        };
        let (gap, fc) = (unique("head_gap"), unique("head_fc"));
        let bad = |reason: String| NetError::BadLayer {
            layer: fc.clone(),
            reason,
        };
        let weight = Tensor::new(vec![out, c], weight).map_err(|e| bad(e.to_string()))?;
        let mut linear = Layer::new(
            fc.clone(),
            LayerKind::Linear(LinearSpec {
                in_features: c,
                out_features: out,
                bias: true,
            }),
        );
        linear.weight = Some(weight);
        linear.bias = Some(Tensor::new(vec![out], bias).map_err(|e| bad(e.to_string()))?);
        self.layers.push(Layer::new(gap, LayerKind::Gap));
        self.layers.push(linear);
        self.ensure_valid()
    }

    pub fn ensure_valid(&self) -> Result<(), NetError> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(NetError::Invalid(v))
        }
    }
}
