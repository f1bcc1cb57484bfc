use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, EngineError, Executor, LossKind, Targets};
use crate::netir::NetworkIR;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Layers whose parameters stay bit-identical.
    pub frozen: BTreeSet<String>,
    pub loss: LossKind,
    /// Return the parameters from the epoch with the lowest validation loss
    /// (epoch 0 included) instead of the final ones.
    #[serde(default)]
    pub keep_best: bool,
    /// Learning-rate multiplier applied after every epoch.
    #[serde(default = "one")]
    pub lr_decay: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            frozen: BTreeSet::new(),
            loss: LossKind::SoftmaxCrossEntropy,
            keep_best: false,
            lr_decay: 1.0,
        }
    }
}

/// One row of the loss history; `metric` is accuracy for cross-entropy and
/// RMSE for MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: NetworkIR,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

fn evaluate(exec: &Executor, batch: &Batch, loss: LossKind) -> Result<(f64, f64), EngineError> {
    let (outs, _) = exec.run(&batch.images, exec.num_layers(), &[], &[])?;
    let n = outs.len();
    let out_len = outs.first().map_or(0, Vec::len);
    batch.targets.check(n, out_len, loss)?;
    let total: f64 = (0..n).map(|i| batch.targets.loss_row(i, &outs[i], loss).0).sum();
    let mean = total / n as f64;
    let metric = match &batch.targets {
        Targets::Classes(c) => {
            let hits = outs
                .iter()
                .zip(c)
                .filter(|(o, &k)| argmax(o) == k)
                .count();
            hits as f64 / n as f64
        }
        Targets::Regression { dim, .. } => (mean / *dim as f64).sqrt(),
    };
    Ok((mean, metric))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mini-batch SGD with classical momentum. Epoch 0 in the history is the
/// evaluation before any update.
pub fn train_sgd(
    net: &NetworkIR,
    train: &Batch,
    val: Option<&Batch>,
    config: &TrainConfig,
) -> Result<TrainOutcome, EngineError> {
    if train.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    for f in &config.frozen {
        net.layer_index(f).map_err(|_| EngineError::UnknownFrozen(f.clone()))?;
    }
    let trainable: Vec<bool> = net
        .layers
        .iter()
        .map(|l| !config.frozen.contains(&l.name))
        .collect();

    let mut exec = Executor::new(net)?;
    let mut velocity: Vec<_> = exec
        .params
        .iter()
        .map(|p| (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();

    let record = |exec: &Executor, epoch: usize, history: &mut Vec<EpochRecord>| -> Result<Option<f64>, EngineError> {
        let (loss, metric) = evaluate(exec, train, config.loss)?;
        if !loss.is_finite() {
            return Err(EngineError::NonFiniteLoss { epoch, step: None });
        }
        history.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss,
            metric,
        });
        if let Some(v) = val {
            let (loss, metric) = evaluate(exec, v, config.loss)?;
            history.push(EpochRecord {
                epoch,
                split: "val".into(),
                loss,
                metric,
            });
            return Ok(Some(loss));
        }
        Ok(None)
    };

    let mut best = (record(&exec, 0, &mut history)?, 0usize, exec.params.clone());
    let batch_size = config.batch_size.max(1);
    let mut lr = config.lr;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (step, rows) in order.chunks(batch_size).enumerate() {
            let mb = train.subset(rows);
            let (loss, grads) = exec.loss_and_grad(&mb.images, &mb.targets, config.loss)?;
            if !loss.is_finite() {
                return Err(EngineError::NonFiniteLoss { epoch, step: Some(step) });
            }
            for (i, g) in grads.iter().enumerate() {
                if !trainable[i] {
                    continue;
                }
                let (vw, vb) = &mut velocity[i];
                let p = &mut exec.params[i];
                for ((w, v), gw) in p.weight.iter_mut().zip(vw.iter_mut()).zip(&g.weight) {
                    *v = config.momentum * *v - lr * gw;
                    *w += *v;
                }
                for ((b, v), gb) in p.bias.iter_mut().zip(vb.iter_mut()).zip(&g.bias) {
                    *v = config.momentum * *v - lr * gb;
                    *b += *v;
                }
            }
        }
        lr *= config.lr_decay;
        let val_loss = record(&exec, epoch, &mut history)?;
        if config.keep_best {
            if let (Some(v), Some(b)) = (val_loss, best.0) {
                if v < b {
                    best = (Some(v), epoch, exec.params.clone());
                }
            }
        }
    }

    let best_epoch = if config.keep_best && val.is_some() {
        exec.params = best.2;
        best.1
    } else {
        config.epochs
    };
    let mut out = net.clone();
    exec.write_back(&mut out, |i| trainable[i]);
    Ok(TrainOutcome {
        net: out,
        history,
        best_epoch,
    })
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
