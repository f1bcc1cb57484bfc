//! Linear probes on frozen features: least-squares regression, turned into
//! categorical predictions by thresholding, binning or argmax.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{Archive, FormatError};
use crate::bins::BinEdges;
use crate::engine::{train_sgd, Batch, EngineError, Executor, LossKind, Targets, TrainConfig};
use crate::features::{extract_gap, FeatureError, FeatureMatrix, Standardizer};
use crate::netir::{NetError, NetworkIR};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("features carry no target column `{0}`")]
    MissingTarget(String),
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("target `{0}` is constant on the training split")]
    ConstantTarget(String),
    #[error("feature dimension {got} does not match the model's {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid task: {0}")]
    Task(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Continuous target; accuracy is not defined.
    Regression { column: String },
    /// 0/1 target, thresholded at a learned `tau`.
    Binary { column: String },
    /// Continuous target regressed, then binned.
    Binned { column: String, edges: BinEdges },
    /// One-vs-rest least squares over class indices, argmax.
    Classification { column: String, classes: usize },
    /// Independent binary probes, accuracy averaged over labels.
    Multilabel { columns: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    /// Target columns read from the feature matrix.
    pub fn columns(&self) -> Vec<&str> {
        match &self.kind {
            TaskKind::Regression { column }
            | TaskKind::Binary { column }
            | TaskKind::Binned { column, .. }
            | TaskKind::Classification { column, .. } => vec![column],
            TaskKind::Multilabel { columns } => columns.iter().map(String::as_str).collect(),
        }
    }

    fn outputs(&self) -> usize {
        match &self.kind {
            TaskKind::Classification { classes, .. } => *classes,
            TaskKind::Multilabel { columns } => columns.len(),
            _ => 1,
        }
    }

    /// Row-major `n x outputs` regression targets and, where defined, the
    /// `n x labels` true categories.
    fn targets(&self, f: &FeatureMatrix) -> Result<(Vec<f64>, Option<Vec<usize>>), ProbeError> {
        let get = |c: &str| f.target(c).ok_or_else(|| ProbeError::MissingTarget(c.to_string()));
        let as_class = |v: f32, k: usize| -> Result<usize, ProbeError> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < k {
                Ok(v as usize)
            } else {
                Err(ProbeError::Task(format!("`{}`: value {v} is not a class below {k}", self.name)))
            }
        };
        Ok(match &self.kind {
            TaskKind::Regression { column } => (get(column)?.iter().map(|&v| v as f64).collect(), None),
            TaskKind::Binary { column } => {
                let c = get(column)?.iter().map(|&v| as_class(v, 2)).collect::<Result<Vec<_>, _>>()?;
                (c.iter().map(|&k| k as f64).collect(), Some(c))
            }
            TaskKind::Binned { column, edges } => {
                let y: Vec<f64> = get(column)?.iter().map(|&v| v as f64).collect();
                let c = y.iter().map(|&v| edges.bin(v)).collect();
                (y, Some(c))
            }
            TaskKind::Classification { column, classes } => {
                let c = get(column)?
                    .iter()
                    .map(|&v| as_class(v, *classes))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut y = vec![0.0; c.len() * classes];
                for (i, &k) in c.iter().enumerate() {
                    y[i * classes + k] = 1.0;
                }
                (y, Some(c))
            }
            TaskKind::Multilabel { columns } => {
                let cols = columns.iter().map(|c| get(c)).collect::<Result<Vec<_>, _>>()?;
                let n = f.rows();
                let mut c = Vec::with_capacity(n * cols.len());
                for i in 0..n {
                    for col in &cols {
                        c.push(as_class(col[i], 2)?);
                    }
                }
                (c.iter().map(|&k| k as f64).collect(), Some(c))
            }
        })
    }
}

/// Train/validation/test fractions and the shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.25,
            test: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle of `0..n` cut by the fractions; sizes are rounded and
    /// the test split takes the remainder.
    pub fn indices(&self, n: usize) -> SplitIndices {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let total = self.train + self.val + self.test;
        let n_train = ((self.train / total) * n as f64).round() as usize;
        let n_val = (((self.val / total) * n as f64).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let sorted = |mut v: Vec<usize>| {
            v.sort_unstable();
            v
        };
        SplitIndices {
            train: sorted(order[..n_train].to_vec()),
            val: sorted(order[n_train..n_train + n_val].to_vec()),
            test: sorted(order[n_train + n_val..].to_vec()),
        }
    }
}

/// Affine map `w . x + b` on raw (unstandardized) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearMap {
    pub fn apply(&self, x: &[f32]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * *v as f64).sum::<f64>()
    }
}

/// Least squares with intercept on row-major `n x p` data. Falls back to a
/// ridge jitter `1e-6 * trace(X'X) / p` when the centred Gram matrix is
/// singular.
pub fn least_squares(x: &[f64], n: usize, p: usize, y: &[f64]) -> LinearMap {
    let mean_x: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64).collect();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, p, |i, j| x[i * p + j] - mean_x[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - mean_y));
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * yc;
    let solve = |g: DMatrix<f64>| {
        let chol = g.cholesky()?;
        let l = chol.l();
        let (lo, hi) = l
            .diagonal()
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
        // Squared diagonal ratio bounds the condition number from below.
        if (lo / hi).powi(2) < 1e-12 {
            return None;
        }
        Some(chol.solve(&rhs))
    };
    let w = solve(gram.clone()).unwrap_or_else(|| {
        let eps = 1e-6 * gram.trace().max(f64::MIN_POSITIVE) / p as f64;
        let jittered = &gram + DMatrix::identity(p, p) * eps;
        jittered
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .unwrap_or_else(|| DVector::zeros(p))
    });
    let intercept = mean_y - w.iter().zip(&mean_x).map(|(w, m)| w * m).sum::<f64>();
    LinearMap {
        weights: w.iter().copied().collect(),
        intercept,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub task: TaskSpec,
    pub layer: String,
    pub filter_ids: Vec<usize>,
    /// One map per output: a single one for binary, binned and regression
    /// tasks, one per class or label otherwise.
    pub maps: Vec<LinearMap>,
    /// Decision thresholds, one per binary output (output `>= tau` is
    /// positive).
    pub thresholds: Vec<f64>,
    pub train_rmse: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Row-major `n x outputs` continuous outputs.
    pub scores: Vec<f64>,
    /// Row-major `n x labels` categories (empty for regression tasks).
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    /// Fraction of correct categories; `None` for regression tasks.
    pub accuracy: Option<f64>,
    /// RMSE of continuous outputs against regression targets.
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub model: ProbeModel,
    pub split: SplitIndices,
    pub train: Evaluation,
    pub val: Option<Evaluation>,
    pub test: Option<Evaluation>,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.len().max(1) as f64).sqrt()
}

/// Threshold maximizing accuracy of `score >= tau` among midpoints of
/// consecutive distinct scores (and one point below and above all of
/// them). Ties go to the candidate nearest 0.5.
pub fn best_threshold(scores: &[f64], labels: &[usize]) -> f64 {
    if scores.is_empty() {
        return 0.5;
    }
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut candidates = vec![pairs[0].0 - 1.0];
    for w in pairs.windows(2) {
        if w[1].0 > w[0].0 {
            candidates.push(0.5 * (w[0].0 + w[1].0));
        }
    }
    candidates.push(pairs[pairs.len() - 1].0 + 1.0);

    // Sweep: at candidate t, positives are the scores >= t.
    let total_pos = pairs.iter().filter(|p| p.1 == 1).count();
    let mut best = (0usize, f64::INFINITY, 0.5);
    let mut below = 0usize;
    let mut neg_below = 0usize;
    for &t in &candidates {
        while below < pairs.len() && pairs[below].0 < t {
            if pairs[below].1 == 0 {
                neg_below += 1;
            }
            below += 1;
        }
        let pos_above = total_pos - (below - neg_below);
        let correct = neg_below + pos_above;
        let dist = (t - 0.5).abs();
        if correct > best.0 || (correct == best.0 && dist < best.1) {
            best = (correct, dist, t);
        }
    }
    best.2
}

fn check_dim(model: &ProbeModel, f: &FeatureMatrix) -> Result<(), ProbeError> {
    if f.cols() != model.filter_ids.len() {
        return Err(ProbeError::Dimension {
            expected: model.filter_ids.len(),
            got: f.cols(),
        });
    }
    Ok(())
}

fn scores(model: &ProbeModel, f: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .flat_map(|&i| model.maps.iter().map(move |m| m.apply(f.row(i))))
        .collect()
}

fn categorize(model: &ProbeModel, scores: &[f64]) -> Vec<usize> {
    let h = model.maps.len();
    match &model.task.kind {
        TaskKind::Regression { .. } => Vec::new(),
        TaskKind::Binary { .. } | TaskKind::Multilabel { .. } => scores
            .iter()
            .enumerate()
            .map(|(k, s)| usize::from(*s >= model.thresholds[k % h]))
            .collect(),
        TaskKind::Binned { edges, .. } => scores.iter().map(|&s| edges.bin(s)).collect(),
        TaskKind::Classification { .. } => scores.chunks(h).map(crate::engine::argmax).collect(),
    }
}

/// Continuous outputs and categories for every row.
pub fn predict(model: &ProbeModel, f: &FeatureMatrix) -> Result<Prediction, ProbeError> {
    check_dim(model, f)?;
    let rows: Vec<usize> = (0..f.rows()).collect();
    let scores = scores(model, f, &rows);
    let labels = categorize(model, &scores);
    Ok(Prediction { scores, labels })
}

/// Metrics on the given rows of `f`, which must carry the task's targets.
pub fn evaluate(model: &ProbeModel, f: &FeatureMatrix, rows: &[usize]) -> Result<Evaluation, ProbeError> {
    check_dim(model, f)?;
    let (y, classes) = model.task.targets(f)?;
    let h = model.task.outputs();
    let s = scores(model, f, rows);
    let y_rows: Vec<f64> = rows.iter().flat_map(|&i| y[i * h..(i + 1) * h].iter().copied()).collect();
    let accuracy = classes.map(|c| {
        let labels = categorize(model, &s);
        let m = labels.len() / rows.len().max(1);
        let hits = rows
            .iter()
            .enumerate()
            .flat_map(|(r, &i)| (0..m).map(move |k| (r * m + k, i * m + k)))
            .filter(|&(a, b)| labels[a] == c[b])
            .count();
        hits as f64 / labels.len().max(1) as f64
    });
    Ok(Evaluation {
        n: rows.len(),
        accuracy,
        rmse: rmse(&s, &y_rows),
    })
}

/// Fits a probe on the train rows, learns thresholds on the validation rows
/// and reports all three splits. Test rows are never read while fitting.
pub fn fit_probe(f: &FeatureMatrix, task: &TaskSpec, split: &Split) -> Result<ProbeFit, ProbeError> {
    let idx = split.indices(f.rows());
    if idx.train.is_empty() {
        return Err(ProbeError::EmptySplit("train"));
    }
    let model = fit_on_rows(f, task, &idx.train, &idx.val)?;
    let eval = |rows: &[usize]| -> Result<Option<Evaluation>, ProbeError> {
        if rows.is_empty() {
            Ok(None)
        } else {
            evaluate(&model, f, rows).map(Some)
        }
    };
    Ok(ProbeFit {
        train: evaluate(&model, f, &idx.train)?,
        val: eval(&idx.val)?,
        test: eval(&idx.test)?,
        model,
        split: idx,
    })
}

/// Fits on explicit train and validation rows.
pub fn fit_on_rows(f: &FeatureMatrix, task: &TaskSpec, train: &[usize], val: &[usize]) -> Result<ProbeModel, ProbeError> {
    let (y, classes) = task.targets(f)?;
    let h = task.outputs();
    let p = f.cols();
    let std = Standardizer::fit(f, train);
    let z = std.apply(f, train);
    let mut maps = Vec::with_capacity(h);
    for k in 0..h {
        let yk: Vec<f64> = train.iter().map(|&i| y[i * h + k]).collect();
        let first = yk[0];
        if matches!(task.kind, TaskKind::Binary { .. } | TaskKind::Regression { .. } | TaskKind::Binned { .. })
            && yk.iter().all(|&v| v == first)
        {
            return Err(ProbeError::ConstantTarget(task.name.clone()));
        }
        let m = least_squares(&z, train.len(), p, &yk);
        // Fold the standardization back into raw-feature weights.
        let weights: Vec<f64> = m.weights.iter().zip(&std.scale).map(|(w, s)| w / s).collect();
        let intercept = m.intercept - weights.iter().zip(&std.mean).map(|(w, mu)| w * mu).sum::<f64>();
        maps.push(LinearMap { weights, intercept });
    }
    let mut model = ProbeModel {
        task: task.clone(),
        layer: f.layer.clone(),
        filter_ids: f.filter_ids.clone(),
        maps,
        thresholds: Vec::new(),
        train_rmse: 0.0,
        val_rmse: f64::NAN,
    };
    if matches!(task.kind, TaskKind::Binary { .. } | TaskKind::Multilabel { .. }) {
        let c = classes.expect("binary tasks have classes");
        let s = scores(&model, f, val);
        model.thresholds = (0..h)
            .map(|k| {
                let sk: Vec<f64> = (0..val.len()).map(|r| s[r * h + k]).collect();
                let ck: Vec<usize> = val.iter().map(|&i| c[i * h + k]).collect();
                best_threshold(&sk, &ck)
            })
            .collect();
    }
    let rm = |rows: &[usize]| {
        let s = scores(&model, f, rows);
        let yr: Vec<f64> = rows.iter().flat_map(|&i| y[i * h..(i + 1) * h].iter().copied()).collect();
        rmse(&s, &yr)
    };
    let train_rmse = rm(train);
    let val_rmse = if val.is_empty() { f64::NAN } else { rm(val) };
    model.train_rmse = train_rmse;
    model.val_rmse = val_rmse;
    Ok(model)
}

impl ProbeModel {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("probe");
        a.meta.push((
            "task".into(),
            serde_json::to_string(&self.task).expect("task serializes"),
        ));
        a.meta.push(("layer".into(), self.layer.clone()));
        let ids: Vec<String> = self.filter_ids.iter().map(usize::to_string).collect();
        a.meta.push(("filters".into(), ids.join(",")));
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        a.meta.push(("thresholds".into(), join(&self.thresholds)));
        a.meta.push(("rmse".into(), join(&[self.train_rmse, self.val_rmse])));
        // Parameters are exact f64 values split into two f32 words each.
        let mut words = Vec::new();
        for m in &self.maps {
            for v in m.weights.iter().chain(std::iter::once(&m.intercept)) {
                let bits = v.to_bits();
                words.push(f32::from_bits((bits >> 32) as u32));
                words.push(f32::from_bits(bits as u32));
            }
        }
        let shape = vec![self.maps.len(), 2 * (self.filter_ids.len() + 1)];
        a.tensors.push(("maps".into(), Tensor::new(shape, words).expect("sized")));
        a
    }

    pub fn from_archive(mut a: Archive) -> Result<ProbeModel, ProbeError> {
        a.expect_kind("probe")?;
        let bad = |m: &str| ProbeError::Format(FormatError::Missing(m.to_string()));
        let task: TaskSpec = serde_json::from_str(a.require_meta("task")?).map_err(|_| bad("task"))?;
        let layer = a.require_meta("layer")?.to_string();
        let ids = a
            .require_meta("filters")?
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|_| bad("filters"))?;
        let floats = |key: &str| -> Result<Vec<f64>, ProbeError> {
            let s = a.require_meta(key)?;
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(|v| v.parse().map_err(|_| bad(key))).collect()
        };
        let thresholds = floats("thresholds")?;
        let rm = floats("rmse")?;
        let t = a.take_tensor("maps")?;
        let width = 2 * (ids.len() + 1);
        if t.shape().len() != 2 || t.shape()[1] != width {
            return Err(bad("maps"));
        }
        let vals: Vec<f64> = t
            .data()
            .chunks(2)
            .map(|w| f64::from_bits(((w[0].to_bits() as u64) << 32) | w[1].to_bits() as u64))
            .collect();
        let maps = vals
            .chunks(ids.len() + 1)
            .map(|c| LinearMap {
                weights: c[..ids.len()].to_vec(),
                intercept: c[ids.len()],
            })
            .collect();
        Ok(ProbeModel {
            task,
            layer,
            filter_ids: ids,
            maps,
            thresholds,
            train_rmse: *rm.first().ok_or_else(|| bad("rmse"))?,
            val_rmse: *rm.get(1).ok_or_else(|| bad("rmse"))?,
        })
    }
}

/// Features of one primary network with the satellite targets attached.
#[derive(Debug, Clone)]
pub struct PrimarySource {
    pub name: String,
    /// Task this network was trained for; its column in the matrix is the
    /// reference for reductions.
    pub primary_task: Option<String>,
    pub features: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub primaries: Vec<String>,
    pub tasks: Vec<String>,
    /// Test accuracy per (primary, task); `None` when the cell could not be
    /// computed.
    pub accuracy: Vec<Vec<Option<f64>>>,
    /// Percentage reduction relative to the network dedicated to the task.
    pub reduction: Vec<Vec<Option<f64>>>,
    pub errors: Vec<String>,
}

impl TransferMatrix {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["primary", "task", "accuracy", "reduction_pct"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, p) in self.primaries.iter().enumerate() {
            for (j, t) in self.tasks.iter().enumerate() {
                w.write_record([p.as_str(), t, &fmt(self.accuracy[i][j]), &fmt(self.reduction[i][j])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Probes every primary network for every task. Cells that fail are left
/// empty and their errors collected.
pub fn transfer_matrix(sources: &[PrimarySource], tasks: &[TaskSpec], split: &Split) -> TransferMatrix {
    let cells: Vec<(usize, usize)> = (0..sources.len())
        .flat_map(|i| (0..tasks.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<Result<f64, String>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let fit = fit_probe(&sources[i].features, &tasks[j], split)
                .map_err(|e| format!("{} / {}: {e}", sources[i].name, tasks[j].name))?;
            fit.test
                .or(fit.val)
                .unwrap_or(fit.train)
                .accuracy
                .ok_or_else(|| format!("{} / {}: task has no accuracy", sources[i].name, tasks[j].name))
        })
        .collect();
    let mut accuracy = vec![vec![None; tasks.len()]; sources.len()];
    let mut errors = Vec::new();
    for (&(i, j), r) in cells.iter().zip(results) {
        match r {
            Ok(a) => accuracy[i][j] = Some(a),
            Err(e) => errors.push(e),
        }
    }
    let mut reduction = vec![vec![None; tasks.len()]; sources.len()];
    for (j, t) in tasks.iter().enumerate() {
        let dedicated = sources
            .iter()
            .position(|s| s.primary_task.as_deref() == Some(t.name.as_str()));
        let Some(reference) = dedicated.and_then(|d| accuracy[d][j]) else {
            continue;
        };
        for i in 0..sources.len() {
            reduction[i][j] = if Some(i) == dedicated {
                Some(0.0)
            } else {
                accuracy[i][j].map(|a| 100.0 * (reference - a) / reference)
            };
        }
    }
    TransferMatrix {
        primaries: sources.iter().map(|s| s.name.clone()).collect(),
        tasks: tasks.iter().map(|t| t.name.clone()).collect(),
        accuracy,
        reduction,
        errors,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTiming {
    pub probe_seconds: f64,
    pub probe_accuracy: f64,
    pub finetune_seconds: f64,
    pub finetune_accuracy: f64,
    pub finetune_epochs: usize,
    /// The finetuned head came within the tolerance of the probe accuracy.
    pub matched: bool,
    pub ratio: f64,
    /// False when the data are too small for the timings to mean anything.
    pub reliable: bool,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

/// Class index per row for the finetuning baseline.
fn class_targets(task: &TaskSpec, f: &FeatureMatrix) -> Result<(Vec<usize>, usize), ProbeError> {
    let (_, classes) = task.targets(f)?;
    let k = match &task.kind {
        TaskKind::Binary { .. } => 2,
        TaskKind::Binned { edges, .. } => edges.num_bins(),
        TaskKind::Classification { classes, .. } => *classes,
        _ => return Err(ProbeError::Task(format!("`{}` has no single class label", task.name))),
    };
    Ok((classes.expect("categorical task"), k))
}

/// Times the probe path (feature extraction + fit) against training a
/// freshly initialized GAP + linear head on the frozen trunk up to `layer`,
/// stopping once the head is within `tolerance` of the probe's validation
/// accuracy or after `config.epochs` epochs.
pub fn probe_timing(
    net: &NetworkIR,
    images: &Tensor,
    targets: &FeatureMatrix,
    layer: &str,
    task: &TaskSpec,
    split: &Split,
    config: &TrainConfig,
    tolerance: f64,
) -> Result<ProbeTiming, ProbeError> {
    let n = images.shape().first().copied().unwrap_or(0);
    let t0 = Instant::now();
    let mut f = extract_gap(net, images, layer)?;
    f.targets = targets.targets.clone();
    let fit = fit_probe(&f, task, split)?;
    let probe_seconds = t0.elapsed().as_secs_f64();
    let probe_accuracy = fit
        .val
        .or(Some(fit.train))
        .and_then(|e| e.accuracy)
        .ok_or_else(|| ProbeError::Task(format!("`{}` has no accuracy", task.name)))?;

    let (labels, k) = class_targets(task, &f)?;
    let idx = fit.split;
    let trunk_end = net.response_index(net.layer_index(layer)?);
    let mut head_net = net.truncated(trunk_end);
    let c = head_net.output_shape()?.c;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = (2.0 / c as f64).sqrt();
    let w: Vec<f32> = (0..k * c)
        .map(|_| (std * normal(&mut rng)) as f32)
        .collect();
    head_net.push_head(w, vec![0.0; k])?;
    let trunk: std::collections::BTreeSet<String> = head_net.layers[..=trunk_end].iter().map(|l| l.name.clone()).collect();
    let all = Batch {
        images: images.clone(),
        targets: Targets::Classes(labels),
    };
    let train = all.subset(&idx.train);
    let val = if idx.val.is_empty() { train.clone() } else { all.subset(&idx.val) };

    let t1 = Instant::now();
    let step = TrainConfig {
        epochs: 1,
        frozen: trunk,
        loss: LossKind::SoftmaxCrossEntropy,
        keep_best: false,
        ..config.clone()
    };
    let mut finetune_accuracy = 0.0;
    let mut epochs = 0;
    let mut current = head_net;
    while epochs < config.epochs.max(1) {
        let out = train_sgd(&current, &train, None, &TrainConfig { seed: config.seed + epochs as u64, ..step.clone() })?;
        current = out.net;
        epochs += 1;
        let exec = Executor::new(&current)?;
        let (outs, _) = exec.run(&val.images, exec.num_layers(), &[], &[])?;
        let Targets::Classes(truth) = &val.targets else { unreachable!() };
        let hits = outs.iter().zip(truth).filter(|(o, &t)| crate::engine::argmax(o) == t).count();
        finetune_accuracy = hits as f64 / truth.len() as f64;
        if finetune_accuracy >= probe_accuracy - tolerance {
            break;
        }
    }
    let finetune_seconds = t1.elapsed().as_secs_f64();
    Ok(ProbeTiming {
        probe_seconds,
        probe_accuracy,
        finetune_seconds,
        finetune_accuracy,
        finetune_epochs: epochs,
        matched: finetune_accuracy >= probe_accuracy - tolerance,
        ratio: finetune_seconds / probe_seconds.max(1e-9),
        reliable: n >= 20,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_features(n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..n * 3)
            .map(|_| normal(&mut rng) as f32)
            .collect();
        let y: Vec<f32> = x.chunks(3).map(|r| 2.0 * r[0] - r[1] + 0.5 * r[2] + 1.0).collect();
        FeatureMatrix::new("l", vec![0, 1, 2], x).unwrap().with_target("y", y).unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = Split::default().indices(10);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 3, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn exact_linear_target_is_recovered() {
        let f = linear_features(40, 1);
        let task = TaskSpec::new("y", TaskKind::Regression { column: "y".into() });
        let fit = fit_probe(&f, &task, &Split::default()).unwrap();
        assert!(fit.model.train_rmse < 1e-6);
        assert!(fit.test.unwrap().rmse < 1e-5);
        let w = &fit.model.maps[0].weights;
        assert!((w[0] - 2.0).abs() < 1e-5 && (w[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn singular_design_still_solves() {
        let x: Vec<f32> = (0..20).flat_map(|i| [i as f32, i as f32]).collect();
        let y: Vec<f64> = (0..20).map(|i| 3.0 * i as f64).collect();
        let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let m = least_squares(&xd, 20, 2, &y);
        assert!((m.weights[0] + m.weights[1] - 3.0).abs() < 1e-4);
        assert!((m.weights[0] - m.weights[1]).abs() < 1e-4);
    }

    #[test]
    fn threshold_is_inclusive_and_maximizes_accuracy() {
        let tau = best_threshold(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]);
        assert!(tau > 0.2 && tau <= 0.7);
        let model = ProbeModel {
            task: TaskSpec::new("b", TaskKind::Binary { column: "b".into() }),
            layer: "l".into(),
            filter_ids: vec![0],
            maps: vec![LinearMap {
                weights: vec![1.0],
                intercept: 0.0,
            }],
            thresholds: vec![0.5],
            train_rmse: 0.0,
            val_rmse: 0.0,
        };
        let f = FeatureMatrix::new("l", vec![0], vec![0.5, 0.49]).unwrap();
        assert_eq!(predict(&model, &f).unwrap().labels, vec![1, 0]);
    }

    #[test]
    fn binned_outputs_clamp_below_the_first_edge() {
        let edges = BinEdges::uniform(0.0, 10.0, 5).unwrap();
        let model = ProbeModel {
            task: TaskSpec::new("a", TaskKind::Binned { column: "a".into(), edges }),
            layer: "l".into(),
            filter_ids: vec![0],
            maps: vec![LinearMap {
                weights: vec![1.0],
                intercept: 0.0,
            }],
            thresholds: vec![],
            train_rmse: 0.0,
            val_rmse: 0.0,
        };
        let f = FeatureMatrix::new("l", vec![0], vec![-3.0, 4.0, 25.0]).unwrap();
        assert_eq!(predict(&model, &f).unwrap().labels, vec![0, 2, 4]);
    }

    #[test]
    fn test_rows_do_not_influence_the_fit() {
        let f = linear_features(60, 4);
        let y: Vec<f32> = f.target("y").unwrap().iter().map(|&v| if v > 1.0 { 1.0 } else { 0.0 }).collect();
        let f = FeatureMatrix { targets: vec![], ..f }.with_target("b", y).unwrap();
        let task = TaskSpec::new("b", TaskKind::Binary { column: "b".into() });
        let a = fit_probe(&f, &task, &Split::default()).unwrap();
        let mut g = f.clone();
        for &i in &a.split.test {
            for j in 0..3 {
                g.x[i * 3 + j] = 1e6;
            }
            g.targets[0].1[i] = 1.0 - g.targets[0].1[i];
        }
        let b = fit_probe(&g, &task, &Split::default()).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn model_archive_round_trip() {
        let f = linear_features(30, 2);
        let task = TaskSpec::new("y", TaskKind::Regression { column: "y".into() });
        let m = fit_probe(&f, &task, &Split::default()).unwrap().model;
        let back = ProbeModel::from_archive(Archive::from_bytes(&m.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn diagonal_reduction_is_zero_and_missing_cells_survive() {
        let f = linear_features(40, 3);
        let b: Vec<f32> = f.target("y").unwrap().iter().map(|&v| (v > 1.0) as u8 as f32).collect();
        let f = f.with_target("b", b).unwrap();
        let sources = vec![
            PrimarySource {
                name: "net".into(),
                primary_task: Some("b".into()),
                features: f,
            },
        ];
        let tasks = vec![
            TaskSpec::new("b", TaskKind::Binary { column: "b".into() }),
            TaskSpec::new("zz", TaskKind::Binary { column: "missing".into() }),
        ];
        let m = transfer_matrix(&sources, &tasks, &Split::default());
        assert_eq!(m.reduction[0][0], Some(0.0));
        assert_eq!(m.accuracy[0][1], None);
        assert_eq!(m.errors.len(), 1);
    }
}
