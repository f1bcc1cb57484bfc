//! Forward and reverse-mode execution of a [`NetworkIR`].
//!
//! Parameters are stored as `f32` in the network but every computation runs
//! in `f64`. Work is split over images; per-image results are combined in
//! index order so outputs do not depend on the thread count.

mod exec;
pub mod ops;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netir::{NetError, NetworkIR, Shape3};
use crate::tensor::Tensor;

pub use exec::{ChannelMask, Executor, ParamSet};
pub use train::{argmax, train_sgd, write_history_csv, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("images have shape {got:?}, network expects n x {expected}")]
    InputShape { expected: Shape3, got: Vec<usize> },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("targets do not fit the loss: {0}")]
    Targets(String),
    #[error("mask on layer {0} does not match its channel count")]
    BadMask(usize),
    /// `step` is `None` when the loss diverged in the end-of-epoch evaluation.
    #[error("non-finite loss at epoch {epoch}{}", step.map(|s| format!(", step {s}")).unwrap_or_default())]
    NonFiniteLoss { epoch: usize, step: Option<usize> },
    #[error("frozen layer `{0}` does not exist")]
    UnknownFrozen(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

/// Per-observation supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Row-major `n x dim` real targets.
    Regression { values: Vec<f64>, dim: usize },
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression { values, dim } => values.len() / (*dim).max(1),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Regression { values, dim } => Targets::Regression {
                values: rows
                    .iter()
                    .flat_map(|&r| values[r * dim..(r + 1) * dim].iter().copied())
                    .collect(),
                dim: *dim,
            },
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
        }
    }

    pub(crate) fn check(&self, n: usize, out_len: usize, loss: LossKind) -> Result<(), EngineError> {
        match (self, loss) {
            (Targets::Regression { values, dim }, LossKind::Mse) => {
                if *dim != out_len || values.len() != n * dim {
                    return Err(EngineError::Targets(format!(
                        "{} regression values of width {dim} for {n} outputs of width {out_len}",
                        values.len()
                    )));
                }
            }
            (Targets::Classes(c), LossKind::SoftmaxCrossEntropy) => {
                if c.len() != n {
                    return Err(EngineError::Targets(format!("{} labels for {n} images", c.len())));
                }
                if let Some(bad) = c.iter().find(|&&k| k >= out_len) {
                    return Err(EngineError::Targets(format!("class {bad} with {out_len} outputs")));
                }
            }
            (Targets::Regression { .. }, LossKind::SoftmaxCrossEntropy) => {
                return Err(EngineError::Targets("cross-entropy needs class labels".into()))
            }
            (Targets::Classes(_), LossKind::Mse) => {
                return Err(EngineError::Targets("MSE needs real-valued targets".into()))
            }
        }
        Ok(())
    }

    /// Loss of one row and its gradient with respect to the output.
    pub(crate) fn loss_row(&self, i: usize, out: &[f64], loss: LossKind) -> (f64, Vec<f64>) {
        match (self, loss) {
            (Targets::Regression { values, dim }, _) => {
                let y = &values[i * dim..(i + 1) * dim];
                let diff: Vec<f64> = out.iter().zip(y).map(|(a, b)| a - b).collect();
                let l = diff.iter().map(|d| d * d).sum();
                (l, diff.into_iter().map(|d| 2.0 * d).collect())
            }
            (Targets::Classes(c), _) => {
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = out.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                let l = z.ln() + max - out[c[i]];
                let mut g: Vec<f64> = exp.into_iter().map(|e| e / z).collect();
                g[c[i]] -= 1.0;
                (l, g)
            }
        }
    }
}

/// Images (`n x C x H x W`, pixel values roughly centred on 0) with their targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Batch {
        Batch {
            images: self.images.gather_rows(rows),
            targets: self.targets.subset(rows),
        }
    }
}

/// Captured activation maps, `n x k x u x v` per requested layer.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub layers: BTreeMap<String, Tensor>,
}

impl ActivationTrace {
    pub fn get(&self, layer: &str) -> Option<&Tensor> {
        self.layers.get(layer)
    }
}

fn stack(rows: Vec<Vec<f64>>, shape: Shape3) -> Tensor {
    let n = rows.len();
    let data = rows.into_iter().flatten().map(|v| v as f32).collect();
    Tensor::new(vec![n, shape.c, shape.h, shape.w], data).expect("row sizes follow layer shape")
}

/// Runs the full network, capturing the named layers' outputs.
pub fn forward(net: &NetworkIR, images: &Tensor, capture: &[&str]) -> Result<(Tensor, ActivationTrace), EngineError> {
    forward_masked(net, images, capture, &[])
}

/// As [`forward`], zeroing every channel not listed in a mask's keep-set on
/// the output of the mask's layer.
pub fn forward_masked(
    net: &NetworkIR,
    images: &Tensor,
    capture: &[&str],
    masks: &[(&str, &[usize])],
) -> Result<(Tensor, ActivationTrace), EngineError> {
    let exec = Executor::new(net)?;
    let capture_idx = capture
        .iter()
        .map(|n| net.layer_index(n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut channel_masks = Vec::with_capacity(masks.len());
    for (name, keep) in masks {
        let idx = net.layer_index(name)?;
        let mut m = vec![false; exec.output_shape(idx).c];
        for &k in *keep {
            *m.get_mut(k).ok_or(EngineError::BadMask(idx))? = true;
        }
        channel_masks.push(ChannelMask { layer: idx, keep: m });
    }
    let (outs, caps) = exec.run(images, exec.num_layers(), &capture_idx, &channel_masks)?;
    let out_shape = net.output_shape()?;
    let mut trace = ActivationTrace::default();
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(outs.len()); capture_idx.len()];
    for img in caps {
        for (slot, act) in per_layer.iter_mut().zip(img) {
            slot.push(act);
        }
    }
    for ((name, idx), rows) in capture.iter().zip(&capture_idx).zip(per_layer) {
        trace
            .layers
            .insert(name.to_string(), stack(rows, exec.output_shape(*idx)));
    }
    Ok((stack(outs, out_shape), trace))
}

/// Activations of layer `layer` (inclusive), computing nothing above it.
pub fn forward_until(net: &NetworkIR, images: &Tensor, layer: usize) -> Result<Tensor, EngineError> {
    let exec = Executor::new(net)?;
    let (outs, _) = exec.run(images, layer + 1, &[], &[])?;
    Ok(stack(outs, exec.output_shape(layer)))
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub layer: String,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub layers: Vec<LayerGrad>,
}

/// Mean batch loss and the gradient of every parameter tensor.
pub fn backward(net: &NetworkIR, batch: &Batch, loss: LossKind) -> Result<Gradients, EngineError> {
    let exec = Executor::new(net)?;
    let (value, grads) = exec.loss_and_grad(&batch.images, &batch.targets, loss)?;
    let to_tensor = |like: &Option<Tensor>, g: &[f64]| {
        like.as_ref().map(|t| {
            Tensor::new(t.shape().to_vec(), g.iter().map(|&v| v as f32).collect())
                .expect("gradient sized like parameter")
        })
    };
    Ok(Gradients {
        loss: value,
        layers: net
            .layers
            .iter()
            .zip(&grads)
            .map(|(l, g)| LayerGrad {
                layer: l.name.clone(),
                weight: to_tensor(&l.weight, &g.weight),
                bias: to_tensor(&l.bias, &g.bias),
            })
            .collect(),
    })
}
