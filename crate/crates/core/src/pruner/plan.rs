use serde::{Deserialize, Serialize};

use super::{opens_group, prune_layer, PruneError};
use crate::engine::{train_sgd, Batch, Executor, LossKind, Targets, TrainConfig, TrainOutcome};
use crate::features::{extract_many, FeatureMatrix, Statistic};
use crate::lassopath::{knee_index, CharacteristicCurve, KneePoint};
use crate::netir::{count_flops, CountReport, LayerKind, NetworkIR};
use crate::probe::{fit_probe, least_squares, Split, TaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKeep {
    pub layer: String,
    /// Original filter indices, ascending.
    pub keep: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knee: Option<KneePoint>,
}

/// Linear readout over the kept filters of the truncation layer, in keep
/// order: `outputs x keep.len()` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Layers above this one (and its ReLU) are removed.
    pub truncation: Option<String>,
    pub layers: Vec<LayerKeep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<Head>,
}

impl PrunePlan {
    pub fn keep_all() -> Self {
        Self {
            truncation: None,
            layers: Vec::new(),
            gamma: None,
            head: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrunedNetwork {
    pub net: NetworkIR,
    pub before: CountReport,
    pub after: CountReport,
}

/// Truncates, prunes every planned layer bottom-up and attaches the head.
pub fn build_pruned_network(net: &NetworkIR, plan: &PrunePlan) -> Result<PrunedNetwork, PruneError> {
    let before = count_flops(net, net.input_shape)?;
    let mut out = net.clone();
    let mut top = net.layers.len();
    if let Some(t) = &plan.truncation {
        let idx = net.layer_index(t)?;
        if !net.layers[idx].kind.is_filter_layer() {
            return Err(PruneError::NotFilterLayer(t.clone()));
        }
        top = net.response_index(idx) + 1;
        out = net.truncated(top - 1);
        out.metadata.insert("truncated_at".into(), t.clone());
    } else if plan.head.is_some() {
        return Err(PruneError::Plan("a head needs a truncation layer".into()));
    }

    let mut order = Vec::with_capacity(plan.layers.len());
    for k in &plan.layers {
        let idx = net.layer_index(&k.layer)?;
        if idx >= top {
            return Err(PruneError::Plan(format!("`{}` lies above the truncation layer", k.layer)));
        }
        if order.iter().any(|(i, _)| *i == idx) {
            return Err(PruneError::Plan(format!("`{}` appears twice", k.layer)));
        }
        order.push((idx, k));
    }
    order.sort_by_key(|(i, _)| *i);
    let planned: Vec<usize> = order.iter().map(|(i, _)| *i).collect();
    if let Some(&d) = planned.iter().find(|&&i| opens_group(&out, i)) {
        return Err(PruneError::Plan(format!(
            "`{}` opens a group; its channels follow the layer feeding it",
            out.layers[d].name
        )));
    }
    for (_, k) in order {
        out = prune_layer(&out, &k.layer, &k.keep)?;
    }

    if let Some(h) = &plan.head {
        let c = out.output_shape()?.c;
        if h.outputs == 0 || h.weights.len() != h.outputs * c || h.bias.len() != h.outputs {
            return Err(PruneError::Plan(format!(
                "head has {} weights and {} biases for {} outputs over {c} channels",
                h.weights.len(),
                h.bias.len(),
                h.outputs
            )));
        }
        out.push_head(
            h.weights.iter().map(|&v| v as f32).collect(),
            h.bias.iter().map(|&v| v as f32).collect(),
        )?;
    }
    let after = count_flops(&out, out.input_shape)?.with_baseline(&before);
    Ok(PrunedNetwork { net: out, before, after })
}

/// Knee point with at least one filter: when the knee of the full curve is
/// the empty model, the sparsest nonempty fit inside the band is used (or
/// the sparsest nonempty fit if none is).
pub fn pruning_knee(curve: &CharacteristicCurve, gamma: f64) -> Result<KneePoint, PruneError> {
    let points: Vec<(usize, f64)> = (0..curve.fits.len()).map(|k| (curve.fits[k].nnz, curve.rmse(k))).collect();
    let mut k = knee_index(&points, gamma)?;
    if points[k].0 == 0 {
        let lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let nonempty = || points.iter().enumerate().filter(|(_, p)| p.0 > 0);
        let inside = nonempty()
            .filter(|(_, p)| hi == lo || p.1 - lo < gamma * (hi - lo))
            .min_by_key(|(i, p)| (p.0, *i));
        k = inside
            .or_else(|| nonempty().min_by_key(|(i, p)| (p.0, *i)))
            .map(|(i, _)| i)
            .ok_or_else(|| PruneError::Other(format!("curve of `{}` never selects a filter", curve.layer)))?;
    }
    let f = &curve.fits[k];
    Ok(KneePoint {
        gamma,
        index: k,
        nnz: f.nnz,
        rmse: points[k].1,
        lambda: f.lambda,
        support: f.support(),
    })
}

/// Plan from one characteristic curve per prunable layer at or below
/// `truncation`. Layers whose keep-set follows from a group rule are
/// skipped; the head comes from the truncation layer's knee fit.
pub fn plan_from_curves(
    net: &NetworkIR,
    truncation: &str,
    curves: &[CharacteristicCurve],
    gamma: f64,
) -> Result<PrunePlan, PruneError> {
    let top = net.layer_index(truncation)?;
    let mut indexed: Vec<(usize, &CharacteristicCurve)> = Vec::new();
    for c in curves {
        let idx = net.layer_index(&c.layer)?;
        if idx <= top {
            indexed.push((idx, c));
        }
    }
    indexed.sort_by_key(|(i, _)| *i);

    let mut layers = Vec::new();
    let mut head = None;
    for (idx, c) in indexed {
        let knee = pruning_knee(c, gamma)?;
        if idx == top {
            let (support, map) = c.raw_map(knee.index);
            head = Some(Head {
                outputs: 1,
                weights: map.weights,
                bias: vec![map.intercept],
            });
            debug_assert_eq!(support, knee.support);
        }
        if opens_group(net, idx) && idx != top {
            continue;
        }
        layers.push(LayerKeep {
            layer: c.layer.clone(),
            keep: knee.support.iter().map(|&j| c.filter_ids[j]).collect(),
            knee: Some(knee),
        });
    }
    let head = head.ok_or_else(|| PruneError::Plan(format!("no curve for the truncation layer `{truncation}`")))?;
    if opens_group(net, top) {
        return Err(PruneError::Plan(format!(
            "truncation layer `{truncation}` opens a group; its channels follow the layer feeding it"
        )));
    }
    Ok(PrunePlan {
        truncation: Some(truncation.to_string()),
        layers,
        gamma: Some(gamma),
        head: Some(head),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationChoice {
    pub layer: String,
    /// Held-out probe RMSE per candidate, in network order.
    pub table: Vec<(String, f64)>,
}

/// Candidate layer with the lowest held-out probe RMSE; differences below
/// `1e-9` count as ties, which go to the deepest layer. Group openers are
/// scored but never chosen.
pub fn select_truncation_layer(
    net: &NetworkIR,
    images: &Tensor,
    targets: &FeatureMatrix,
    task: &TaskSpec,
    candidates: &[&str],
    split: &Split,
) -> Result<TruncationChoice, PruneError> {
    if candidates.is_empty() {
        return Err(PruneError::Plan("no candidate layers".into()));
    }
    let mut ordered: Vec<(usize, &str)> = candidates
        .iter()
        .map(|c| net.layer_index(c).map(|i| (i, *c)))
        .collect::<Result<_, _>>()?;
    ordered.sort_by_key(|(i, _)| *i);
    let names: Vec<&str> = ordered.iter().map(|(_, n)| *n).collect();
    let feats = extract_many(net, images, &names, Statistic::Gap)?;
    let mut table = Vec::with_capacity(feats.len());
    for mut f in feats {
        f.targets = targets.targets.clone();
        let fit = fit_probe(&f, task, split)?;
        let rmse = fit.test.or(fit.val).unwrap_or(fit.train).rmse;
        table.push((f.layer.clone(), rmse));
    }
    // group openers cannot hold their own keep-set
    let eligible: Vec<&(String, f64)> = table
        .iter()
        .zip(&ordered)
        .filter(|(_, (i, _))| !opens_group(net, *i))
        .map(|(t, _)| t)
        .collect();
    let best = eligible.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    let layer = eligible
        .iter()
        .rev()
        .find(|t| t.1 - best <= 1e-9)
        .map(|t| t.0.clone())
        .ok_or_else(|| PruneError::Plan("every candidate opens a group".into()))?;
    Ok(TruncationChoice { layer, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Refit the linear head by least squares before gradient steps.
    pub refit_head: bool,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            refit_head: true,
            train: TrainConfig {
                lr: 0.002,
                momentum: 0.9,
                epochs: 10,
                batch_size: 16,
                loss: LossKind::Mse,
                keep_best: true,
                ..TrainConfig::default()
            },
        }
    }
}

/// Per-output mean and scale of row-major `n x dim` targets.
fn target_scaling(values: &[f64], dim: usize) -> Vec<(f64, f64)> {
    let n = (values.len() / dim.max(1)).max(1) as f64;
    (0..dim)
        .map(|k| {
            let col = values.iter().skip(k).step_by(dim);
            let mu = col.clone().sum::<f64>() / n;
            let sd = (col.map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
            (mu, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect()
}

fn scale_batch(b: &Batch, s: &[(f64, f64)]) -> Batch {
    let Targets::Regression { values, dim } = &b.targets else {
        unreachable!("checked by the caller")
    };
    let values = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (mu, sd) = s[i % dim];
            (v - mu) / sd
        })
        .collect();
    Batch {
        images: b.images.clone(),
        targets: Targets::Regression { values, dim: *dim },
    }
}

/// Maps the linear head between target units and standardized units.
fn rescale_head(net: &mut NetworkIR, s: &[(f64, f64)], to_standard: bool) {
    let fc = net.layers.last_mut().expect("head present");
    let p = fc.weight.as_ref().map_or(0, |w| w.row_len());
    if let Some(w) = &mut fc.weight {
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let sd = s[i / p].1;
            *v = if to_standard { (*v as f64 / sd) as f32 } else { (*v as f64 * sd) as f32 };
        }
    }
    if let Some(b) = &mut fc.bias {
        for (k, v) in b.data_mut().iter_mut().enumerate() {
            let (mu, sd) = s[k];
            *v = if to_standard {
                ((*v as f64 - mu) / sd) as f32
            } else {
                (*v as f64 * sd + mu) as f32
            };
        }
    }
}

/// Finetunes a pruned regression network ending in GAP + linear. Training
/// runs on targets standardized with the training rows' mean and spread
/// (the history reports losses in those units); the returned network
/// predicts in the original units. Its parameters are those of the epoch
/// with the lowest validation loss, the starting point included.
pub fn finetune(net: &NetworkIR, train: &Batch, val: &Batch, cfg: &FinetuneConfig) -> Result<TrainOutcome, PruneError> {
    let n = net.layers.len();
    let head_ok = n >= 2
        && net.layers[n - 2].kind == LayerKind::Gap
        && matches!(net.layers[n - 1].kind, LayerKind::Linear(_));
    if !head_ok {
        return Err(PruneError::Finetune("network does not end in GAP + linear".into()));
    }
    let Targets::Regression { values, dim } = &train.targets else {
        return Err(PruneError::Finetune("needs regression targets".into()));
    };
    if !matches!(val.targets, Targets::Regression { dim: d, .. } if d == *dim) {
        return Err(PruneError::Finetune("validation targets do not match the training targets".into()));
    }
    let mut start = net.clone();
    if cfg.refit_head {
        let exec = Executor::new(net)?;
        let (gap, _) = exec.run(&train.images, n - 1, &[], &[])?;
        let p = gap.first().map_or(0, Vec::len);
        let x: Vec<f64> = gap.into_iter().flatten().collect();
        let rows = train.len();
        let mut w = Vec::with_capacity(dim * p);
        let mut b = Vec::with_capacity(*dim);
        for k in 0..*dim {
            let y: Vec<f64> = (0..rows).map(|i| values[i * dim + k]).collect();
            let m = least_squares(&x, rows, p, &y);
            w.extend(m.weights.iter().map(|&v| v as f32));
            b.push(m.intercept as f32);
        }
        let fc = &mut start.layers[n - 1];
        fc.weight = Some(Tensor::new(vec![*dim, p], w).expect("dim x p weights"));
        fc.bias = Some(Tensor::new(vec![*dim], b).expect("dim biases"));
    }
    let s = target_scaling(values, *dim);
    rescale_head(&mut start, &s, true);
    let tc = TrainConfig {
        loss: LossKind::Mse,
        keep_best: true,
        ..cfg.train.clone()
    };
    let mut out = train_sgd(&start, &scale_batch(train, &s), Some(&scale_batch(val, &s)), &tc)?;
    rescale_head(&mut out.net, &s, false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::forward;
    use crate::netir::{NetworkBuilder, Shape3};

    fn light() -> NetworkIR {
        NetworkBuilder::new("t", Shape3::new(1, 8, 8))
            .mfm(3, 3)
            .group(1, 4, 3)
            .group(2, 3, 3)
            .gap()
            .linear(2)
            .build(7)
            .unwrap()
    }

    fn keep(layer: &str, keep: Vec<usize>) -> LayerKeep {
        LayerKeep {
            layer: layer.into(),
            keep,
            knee: None,
        }
    }

    #[test]
    fn empty_plan_is_identity() {
        let net = light();
        let p = build_pruned_network(&net, &PrunePlan::keep_all()).unwrap();
        assert!(p.net.bit_eq(&net));
        assert_eq!(p.after.reduction.unwrap().params, 0.0);
    }

    #[test]
    fn group_keep_sets_the_next_opener() {
        let net = light();
        let second = net.layers[net.group_members(1)[1]].name.clone();
        let opener = net.layers[net.group_members(2)[0]].name.clone();
        let plan = PrunePlan {
            layers: vec![keep(&second, vec![1, 3])],
            ..PrunePlan::keep_all()
        };
        let p = build_pruned_network(&net, &plan).unwrap();
        assert_eq!(p.net.layer(&opener).unwrap().kind.conv().unwrap().out_channels, 4);
        let clash = PrunePlan {
            layers: vec![keep(&second, vec![1, 3]), keep(&opener, vec![0])],
            ..PrunePlan::keep_all()
        };
        assert!(matches!(build_pruned_network(&net, &clash), Err(PruneError::Plan(_))));
    }

    #[test]
    fn truncation_and_head() {
        let net = light();
        let second = net.layers[net.group_members(1)[1]].name.clone();
        let plan = PrunePlan {
            truncation: Some(second.clone()),
            layers: vec![keep(&second, vec![0, 2])],
            gamma: Some(0.01),
            head: Some(Head {
                outputs: 1,
                weights: vec![0.5, -1.0],
                bias: vec![0.25],
            }),
        };
        let p = build_pruned_network(&net, &plan).unwrap();
        assert_eq!(p.net.output_shape().unwrap(), Shape3::new(1, 1, 1));
        assert!(p.after.total_params < p.before.total_params);
        let images = Tensor::from_fn(vec![2, 1, 8, 8], |i| ((i * 37 % 11) as f32 - 5.0) / 10.0);
        let (_, trace) = forward(&net, &images, &[&second]).unwrap();
        let (out, _) = forward(&p.net, &images, &[]).unwrap();
        let act = trace.get(&second).unwrap();
        let plane = 64;
        for n in 0..2 {
            let gap = |c: usize| {
                let base = n * 4 * plane + c * plane;
                act.data()[base..base + plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64
            };
            let expected = 0.25 + 0.5 * gap(0) - gap(2);
            assert!((out.data()[n] as f64 - expected).abs() < 1e-5);
        }

        let mut bad = plan.clone();
        bad.layers.push(keep("fc", vec![0]));
        assert!(build_pruned_network(&net, &bad).is_err());
        let mut bad = plan;
        bad.head.as_mut().unwrap().weights.push(1.0);
        assert!(matches!(build_pruned_network(&net, &bad), Err(PruneError::Plan(_))));
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = PrunePlan {
            truncation: Some("conv2".into()),
            layers: vec![keep("conv1", vec![0, 4]), keep("conv2", vec![1])],
            gamma: Some(0.01),
            head: Some(Head {
                outputs: 1,
                weights: vec![0.1 + 0.2],
                bias: vec![-1.0 / 3.0],
            }),
        };
        let back: PrunePlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
    }
}
