use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{LayerKind, NetworkIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    /// A layer's declared input does not match what the previous layer produces.
    ShapeChain,
    /// An MFM block's internal convolution has an odd channel count.
    MfmParity,
    ParamShape,
    MissingParam,
    UnexpectedParam,
    NonFiniteParam,
    DuplicateName,
    BadName,
    Group,
    ZeroSize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub layer: Option<String>,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.layer {
            Some(l) => write!(f, "{l}: {:?}: {}", self.kind, self.message),
            None => write!(f, "{:?}: {}", self.kind, self.message),
        }
    }
}

/// Every shape-chain, parameter and group violation in `net`; empty when valid.
pub fn validate(net: &NetworkIR) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |layer: Option<&str>, kind, message: String| {
        out.push(Violation {
            layer: layer.map(str::to_string),
            kind,
            message,
        })
    };

    if net.input_shape.is_empty() {
        push(None, ViolationKind::ZeroSize, format!("input shape {} is empty", net.input_shape));
    }

    let mut seen = HashSet::new();
    let mut current = Some(net.input_shape);
    for layer in &net.layers {
        let name = layer.name.as_str();
        if name.is_empty() || name.contains(char::is_whitespace) {
            push(Some(name), ViolationKind::BadName, "names must be non-empty without whitespace".into());
        }
        if !seen.insert(name) {
            push(Some(name), ViolationKind::DuplicateName, "name used twice".into());
        }

        if let Some(c) = layer.kind.conv() {
            if c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                push(Some(name), ViolationKind::ZeroSize, "conv sizes must be positive".into());
            }
        }
        if let LayerKind::Mfm(c) = &layer.kind {
            if c.out_channels % 2 != 0 {
                push(
                    Some(name),
                    ViolationKind::MfmParity,
                    format!("internal conv emits {} channels, expected an even count", c.out_channels),
                );
            }
        }
        if let LayerKind::MaxPool2d(p) = &layer.kind {
            if p.window == 0 || p.stride == 0 {
                push(Some(name), ViolationKind::ZeroSize, "pool sizes must be positive".into());
            }
        }
        if let LayerKind::Linear(l) = &layer.kind {
            if l.in_features == 0 || l.out_features == 0 {
                push(Some(name), ViolationKind::ZeroSize, "linear sizes must be positive".into());
            }
        }

        match (layer.kind.weight_shape(), &layer.weight) {
            (Some(expected), Some(w)) if w.shape() != expected.as_slice() => push(
                Some(name),
                ViolationKind::ParamShape,
                format!("weight shape {:?}, expected {:?}", w.shape(), expected),
            ),
            (Some(_), None) => push(Some(name), ViolationKind::MissingParam, "weight missing".into()),
            (None, Some(_)) => push(Some(name), ViolationKind::UnexpectedParam, "layer takes no weight".into()),
            _ => {}
        }
        match (layer.kind.bias_len(), &layer.bias) {
            (Some(n), Some(b)) if b.shape() != [n] => push(
                Some(name),
                ViolationKind::ParamShape,
                format!("bias shape {:?}, expected [{n}]", b.shape()),
            ),
            (Some(_), None) => push(Some(name), ViolationKind::MissingParam, "bias missing".into()),
            (None, Some(_)) => push(Some(name), ViolationKind::UnexpectedParam, "layer takes no bias".into()),
            _ => {}
        }
        let finite = layer.weight.as_ref().is_none_or(|t| t.is_finite())
            && layer.bias.as_ref().is_none_or(|t| t.is_finite());
        if !finite {
            push(Some(name), ViolationKind::NonFiniteParam, "non-finite parameter".into());
        }

        if let Some(shape) = current {
            current = match layer.kind.output_shape(shape) {
                Ok(s) => Some(s),
                Err(reason) => {
                    push(Some(name), ViolationKind::ShapeChain, reason);
                    None
                }
            };
        }
    }

    for g in net.groups() {
        let members = net.group_members(g);
        let label = format!("group {g}");
        if members.len() != 2 {
            push(Some(&label), ViolationKind::Group, format!("has {} layers, expected 2", members.len()));
            continue;
        }
        let (a, b) = (&net.layers[members[0]], &net.layers[members[1]]);
        match (&a.kind, &b.kind) {
            (LayerKind::Mfm(first), LayerKind::Mfm(_)) => {
                if first.kernel != 1 || first.out_channels != 2 * first.in_channels {
                    push(
                        Some(&label),
                        ViolationKind::Group,
                        "first block must be a square 1x1 MFM".into(),
                    );
                }
                let between = &net.layers[members[0] + 1..members[1]];
                if !between.iter().all(|l| l.kind.is_channelwise()) {
                    push(
                        Some(&label),
                        ViolationKind::Group,
                        "only channelwise layers may sit between the two blocks".into(),
                    );
                }
            }
            _ => push(Some(&label), ViolationKind::Group, "members must be MFM layers".into()),
        }
    }

    out
}
