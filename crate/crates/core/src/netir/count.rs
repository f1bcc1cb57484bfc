use serde::{Deserialize, Serialize};

use super::{LayerKind, NetError, NetworkIR, Shape3};

/// Counting convention: a multiply-accumulate is two FLOPs, every comparison
/// (ReLU, max-pool, MFM) and every GAP addition is one. Bias additions are
/// not counted.
pub const FLOP_CONVENTION: &str = "2mac+cmp+gapadd/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub params: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub convention: String,
    pub input_shape: Shape3,
    pub per_layer: Vec<LayerCount>,
    pub total_params: u64,
    pub total_flops: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<Reduction>,
}

impl CountReport {
    /// Fractional reductions `1 - self / baseline`.
    pub fn reduction_vs(&self, baseline: &CountReport) -> Reduction {
        let frac = |after: u64, before: u64| {
            if before == 0 {
                0.0
            } else {
                1.0 - after as f64 / before as f64
            }
        };
        Reduction {
            params: frac(self.total_params, baseline.total_params),
            flops: frac(self.total_flops, baseline.total_flops),
        }
    }

    pub fn with_baseline(mut self, baseline: &CountReport) -> Self {
        self.reduction = Some(self.reduction_vs(baseline));
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn layer_params(kind: &LayerKind) -> u64 {
    let w = kind
        .weight_shape()
        .map(|s| s.iter().product::<usize>())
        .unwrap_or(0);
    (w + kind.bias_len().unwrap_or(0)) as u64
}

fn layer_flops(kind: &LayerKind, input: Shape3, output: Shape3) -> u64 {
    let n = |v: usize| v as u64;
    match kind {
        LayerKind::Conv2d(c) => {
            2 * n(c.out_channels) * n(c.in_channels) * n(c.kernel * c.kernel) * n(output.plane())
        }
        LayerKind::Mfm(c) => {
            2 * n(c.out_channels) * n(c.in_channels) * n(c.kernel * c.kernel) * n(output.plane())
                + n(output.len())
        }
        LayerKind::Relu => n(input.len()),
        LayerKind::MaxPool2d(p) => n(p.window * p.window - 1) * n(output.len()),
        LayerKind::Gap => n(input.len()),
        LayerKind::Linear(l) => 2 * n(l.in_features) * n(l.out_features),
    }
}

fn count(net: &NetworkIR, input_shape: Shape3) -> Result<CountReport, NetError> {
    net.ensure_valid()?;
    let shapes = net.shapes_from(input_shape)?;
    let mut prev = input_shape;
    let mut per_layer = Vec::with_capacity(net.layers.len());
    for (layer, &out) in net.layers.iter().zip(&shapes) {
        per_layer.push(LayerCount {
            layer: layer.name.clone(),
            kind: layer.kind.tag().to_string(),
            params: layer_params(&layer.kind),
            flops: layer_flops(&layer.kind, prev, out),
        });
        prev = out;
    }
    Ok(CountReport {
        convention: FLOP_CONVENTION.to_string(),
        input_shape,
        total_params: per_layer.iter().map(|l| l.params).sum(),
        total_flops: per_layer.iter().map(|l| l.flops).sum(),
        per_layer,
        reduction: None,
    })
}

/// Parameter (and FLOP) counts at the network's own input shape.
pub fn count_params(net: &NetworkIR) -> Result<CountReport, NetError> {
    count(net, net.input_shape)
}

/// FLOP (and parameter) counts for an arbitrary input resolution.
pub fn count_flops(net: &NetworkIR, input_shape: Shape3) -> Result<CountReport, NetError> {
    count(net, input_shape)
}
