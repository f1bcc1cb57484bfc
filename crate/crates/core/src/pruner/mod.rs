//! Filter pruning: dropping output channels of a conv or MFM layer and the
//! matching inputs of whatever consumes them.
//!
//! Every edit is a gather over a sorted keep-set `D` of original channel
//! indices. The result computes exactly what the original network computes
//! when the dropped channels are zeroed right after the pruned layer.

mod plan;
mod report;

use thiserror::Error;

use crate::engine::EngineError;
use crate::features::FeatureError;
use crate::lassopath::LassoError;
use crate::netir::{LayerKind, NetError, NetworkIR};
use crate::probe::ProbeError;
use crate::tensor::Tensor;

pub use plan::{
    build_pruned_network, finetune, plan_from_curves, pruning_knee, select_truncation_layer, FinetuneConfig, Head, LayerKeep,
    PrunePlan, PrunedNetwork, TruncationChoice,
};
pub use report::{compression_report, inference_time, CompressionReport, CompressionRow};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Lasso(#[from] LassoError),
    #[error("layer `{0}` is not a convolution or MFM layer")]
    NotFilterLayer(String),
    #[error("keep-set for `{0}` is empty")]
    EmptyKeep(String),
    #[error("keep-set for `{layer}` holds index {index}, layer has {channels} channels")]
    OutOfRange {
        layer: String,
        index: usize,
        channels: usize,
    },
    #[error("`{0}` opens a group; its channels follow the layer feeding it")]
    GroupOpener(String),
    #[error("group {0} does not exist or is malformed")]
    UnknownGroup(u32),
    #[error("FLOP conventions differ: `{before}` vs `{after}`")]
    Convention { before: String, after: String },
    #[error("cannot finetune: {0}")]
    Finetune(String),
    #[error("report output: {0}")]
    Csv(#[from] csv::Error),
    #[error("plan does not fit the network: {0}")]
    Plan(String),
    #[error("{0}")]
    Other(String),
}

/// Sorted, de-duplicated keep-set checked against `channels`.
fn normalize(layer: &str, keep: &[usize], channels: usize) -> Result<Vec<usize>, PruneError> {
    if keep.is_empty() {
        return Err(PruneError::EmptyKeep(layer.to_string()));
    }
    let mut d = keep.to_vec();
    d.sort_unstable();
    d.dedup();
    if let Some(&bad) = d.iter().find(|&&i| i >= channels) {
        return Err(PruneError::OutOfRange {
            layer: layer.to_string(),
            index: bad,
            channels,
        });
    }
    Ok(d)
}

/// Number of channels layer `idx` emits.
fn emitted(net: &NetworkIR, idx: usize) -> Result<usize, PruneError> {
    Ok(net.shapes()?[idx].c)
}

fn gather_rows(t: &Option<Tensor>, rows: &[usize]) -> Option<Tensor> {
    t.as_ref().map(|t| t.gather_rows(rows))
}

/// Restricts the input side of layer `idx` to channels `d` of an input with
/// `plane` spatial positions per channel.
fn restrict_inputs(net: &mut NetworkIR, idx: usize, d: &[usize], plane: usize) {
    let layer = &mut net.layers[idx];
    match &mut layer.kind {
        LayerKind::Conv2d(c) | LayerKind::Mfm(c) => {
            c.in_channels = d.len();
            layer.weight = layer.weight.as_ref().map(|w| w.gather_axis1(d));
        }
        LayerKind::Linear(l) => {
            let w = layer.weight.as_ref().expect("validated linear has weights");
            let channels = l.in_features / plane;
            let blocks = Tensor::new(vec![l.out_features, channels, plane], w.data().to_vec())
                .expect("in_features = channels x plane")
                .gather_axis1(d);
            l.in_features = d.len() * plane;
            layer.weight = Some(Tensor::new(vec![l.out_features, l.in_features], blocks.into_data()).expect("sized"));
        }
        _ => unreachable!("only filter and linear layers consume channels"),
    }
}

/// Index of the layer that reads layer `idx`'s channels, skipping
/// channelwise layers and a GAP, with the spatial size it sees per channel.
fn consumer(net: &NetworkIR, idx: usize) -> Result<Option<(usize, usize)>, PruneError> {
    let shapes = net.shapes()?;
    let mut j = idx + 1;
    while j < net.layers.len() {
        match net.layers[j].kind {
            LayerKind::Relu | LayerKind::MaxPool2d(_) | LayerKind::Gap => j += 1,
            LayerKind::Conv2d(_) | LayerKind::Mfm(_) | LayerKind::Linear(_) => {
                return Ok(Some((j, shapes[j - 1].plane())));
            }
        }
    }
    Ok(None)
}

fn record_kept(net: &mut NetworkIR, layer: &str, d: &[usize]) {
    let key = format!("kept.{layer}");
    let original: Vec<usize> = match net.metadata.get(&key) {
        Some(prev) => {
            let prev: Vec<usize> = prev.split(',').filter_map(|s| s.parse().ok()).collect();
            d.iter().map(|&i| prev[i]).collect()
        }
        None => d.to_vec(),
    };
    let s: Vec<String> = original.iter().map(usize::to_string).collect();
    net.metadata.insert(key, s.join(","));
}

/// Keeps output channels `keep` of the conv or MFM layer `layer` and the
/// corresponding inputs of its consumer. When the consumer is the 1x1 MFM
/// opening a group, that block keeps the same channels on both sides.
/// Keeping every channel returns an unchanged copy.
pub fn prune_layer(net: &NetworkIR, layer: &str, keep: &[usize]) -> Result<NetworkIR, PruneError> {
    let idx = net.layer_index(layer)?;
    if opens_group(net, idx) {
        return Err(PruneError::GroupOpener(layer.to_string()));
    }
    let mut out = prune_unchecked(net, layer, keep)?;
    if let Some(j) = group_opener_after(net, idx)? {
        let name = net.layers[j].name.clone();
        out = prune_unchecked(&out, &name, keep)?;
    }
    out.ensure_valid()?;
    Ok(out)
}

fn prune_unchecked(net: &NetworkIR, layer: &str, keep: &[usize]) -> Result<NetworkIR, PruneError> {
    let idx = net.layer_index(layer)?;
    let kind = net.layers[idx].kind;
    if !kind.is_filter_layer() {
        return Err(PruneError::NotFilterLayer(layer.to_string()));
    }
    let o = emitted(net, idx)?;
    let d = normalize(layer, keep, o)?;
    if d.len() == o {
        return Ok(net.clone());
    }
    let mut out = net.clone();
    let rows: Vec<usize> = match kind {
        // Each MFM output p is the max of internal channels p and p + o.
        LayerKind::Mfm(_) => d.iter().copied().chain(d.iter().map(|&i| i + o)).collect(),
        _ => d.clone(),
    };
    {
        let l = &mut out.layers[idx];
        l.weight = gather_rows(&l.weight, &rows);
        l.bias = gather_rows(&l.bias, &rows);
        match &mut l.kind {
            LayerKind::Conv2d(c) | LayerKind::Mfm(c) => c.out_channels = rows.len(),
            _ => unreachable!(),
        }
    }
    if let Some((next, plane)) = consumer(net, idx)? {
        restrict_inputs(&mut out, next, &d, plane);
    }
    record_kept(&mut out, layer, &d);
    Ok(out)
}

/// Pruning of a plain convolution layer.
pub fn prune_conv_pair(net: &NetworkIR, layer: &str, keep: &[usize]) -> Result<NetworkIR, PruneError> {
    match net.layer(layer)?.kind {
        LayerKind::Conv2d(_) => prune_layer(net, layer, keep),
        _ => Err(PruneError::NotFilterLayer(layer.to_string())),
    }
}

/// Pruning of an MFM block: internal rows `D` and `D + o` survive.
pub fn prune_mfm(net: &NetworkIR, layer: &str, keep: &[usize]) -> Result<NetworkIR, PruneError> {
    match net.layer(layer)?.kind {
        LayerKind::Mfm(_) => prune_layer(net, layer, keep),
        _ => Err(PruneError::NotFilterLayer(layer.to_string())),
    }
}

/// Whether layer `idx` is the first block of a group.
pub fn opens_group(net: &NetworkIR, idx: usize) -> bool {
    net.layers[idx]
        .group
        .is_some_and(|g| net.group_members(g).first() == Some(&idx))
}

/// The group-opening MFM that reads layer `idx`'s channels, if any.
pub fn group_opener_after(net: &NetworkIR, idx: usize) -> Result<Option<usize>, PruneError> {
    Ok(consumer(net, idx)?.and_then(|(j, _)| {
        let starts_other = net.layers[j].group != net.layers[idx].group || net.layers[idx].group.is_none();
        (starts_other && opens_group(net, j) && matches!(net.layers[j].kind, LayerKind::Mfm(_))).then_some(j)
    }))
}

/// The 1x1 MFM that opens the group consuming `group`'s output, if any.
pub fn next_group_head(net: &NetworkIR, group: u32) -> Result<Option<usize>, PruneError> {
    let members = net.group_members(group);
    let &[_, second] = members.as_slice() else {
        return Err(PruneError::UnknownGroup(group));
    };
    group_opener_after(net, second)
}

/// Keeps channels `keep` of a group's output: the group's second MFM is
/// pruned to `D`, and so is the 1x1 MFM opening the next group, on both its
/// inputs and outputs.
pub fn prune_group(net: &NetworkIR, group: u32, keep: &[usize]) -> Result<NetworkIR, PruneError> {
    let members = net.group_members(group);
    let &[_, second] = members.as_slice() else {
        return Err(PruneError::UnknownGroup(group));
    };
    let name = net.layers[second].name.clone();
    prune_layer(net, &name, keep)
}
