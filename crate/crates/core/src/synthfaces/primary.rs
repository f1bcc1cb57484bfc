use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::engine::{train_sgd, Batch, EngineError, EpochRecord, LossKind, Targets, TrainConfig};
use crate::netir::{NetError, NetworkBuilder, NetworkIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Plain conv/ReLU/max-pool stack.
    Vgg,
    /// MFM activations with one group layer.
    LightCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrimaryConfig {
    pub arch: Arch,
    /// Class-valued label column to train on.
    pub task: String,
    /// Channel widths of the three filter stages.
    pub widths: [usize; 3],
    pub seed: u64,
    pub train: TrainConfig,
    /// Training accuracy required to accept the network.
    pub min_accuracy: f64,
}

impl Default for PrimaryConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Vgg,
            task: "identity".into(),
            widths: [8, 16, 32],
            seed: 0,
            train: TrainConfig {
                lr: 0.05,
                momentum: 0.9,
                epochs: 15,
                batch_size: 8,
                lr_decay: 0.9,
                ..TrainConfig::default()
            },
            min_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Error)]
pub enum PrimaryError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("column `{0}` is not a non-negative class label")]
    NotClasses(String),
    #[error("training reached accuracy {accuracy:.3}, below the required {required}")]
    NotConverged {
        accuracy: f64,
        required: f64,
        history: Vec<EpochRecord>,
    },
}

#[derive(Debug, Clone)]
pub struct PrimaryOutcome {
    pub net: NetworkIR,
    pub history: Vec<EpochRecord>,
    pub train_accuracy: f64,
}

impl PrimaryConfig {
    /// Defaults with the learning rate tuned for `arch`.
    pub fn for_arch(arch: Arch) -> Self {
        let mut cfg = Self {
            arch,
            ..Self::default()
        };
        if arch == Arch::LightCnn {
            cfg.train.lr = 0.02;
        }
        cfg
    }
}

/// Class labels from an integer-valued column.
pub fn primary_targets(data: &Dataset, task: &str) -> Result<Vec<usize>, PrimaryError> {
    data.column(task)?
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(PrimaryError::NotClasses(task.to_string()))
            }
        })
        .collect()
}

fn architecture(cfg: &PrimaryConfig, data: &Dataset, classes: usize) -> Result<NetworkIR, PrimaryError> {
    let [a, b, c] = cfg.widths;
    let name = match cfg.arch {
        Arch::Vgg => "vgg-toy",
        Arch::LightCnn => "lightcnn-toy",
    };
    let builder = NetworkBuilder::new(name, data.image_shape());
    let builder = match cfg.arch {
        Arch::Vgg => builder
            .conv(a, 3)
            .relu()
            .maxpool(2, 2)
            .conv(b, 3)
            .relu()
            .maxpool(2, 2)
            .conv(c, 3)
            .relu(),
        Arch::LightCnn => builder
            .mfm(a, 3)
            .maxpool(2, 2)
            .group(1, b, 3)
            .maxpool(2, 2)
            .mfm(c, 3),
    };
    let mut net = builder.gap().linear(classes).build(cfg.seed)?;
    net.primary_task = Some(cfg.task.clone());
    Ok(net)
}

/// Trains a small network on a class-valued column of `data`. With
/// `epochs == 0` the seeded random initialization is returned unchecked,
/// which serves as an untrained control.
pub fn make_primary_net(data: &Dataset, cfg: &PrimaryConfig) -> Result<PrimaryOutcome, PrimaryError> {
    let labels = primary_targets(data, &cfg.task)?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let net = architecture(cfg, data, classes)?;
    let batch = Batch {
        images: data.images.clone(),
        targets: Targets::Classes(labels),
    };
    let train = TrainConfig {
        loss: LossKind::SoftmaxCrossEntropy,
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let out = train_sgd(&net, &batch, None, &train)?;
    let accuracy = out.history.last().map_or(0.0, |r| r.metric);
    if train.epochs > 0 && accuracy < cfg.min_accuracy {
        return Err(PrimaryError::NotConverged {
            accuracy,
            required: cfg.min_accuracy,
            history: out.history,
        });
    }
    let mut net = out.net;
    if train.epochs == 0 {
        net.primary_task = None;
    }
    net.metadata.insert("train_accuracy".into(), format!("{accuracy:.6}"));
    net.metadata.insert("epochs".into(), train.epochs.to_string());
    Ok(PrimaryOutcome {
        net,
        history: out.history,
        train_accuracy: accuracy,
    })
}
