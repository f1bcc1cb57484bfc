use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use prunekit::dataset::Dataset;
use prunekit::engine::{forward, write_history_csv, Batch, LossKind, Targets, TrainConfig};
use prunekit::features::{extract_gap, extract_many, FeatureMatrix, Statistic};
use prunekit::lassopath::{characteristic_curve, kneepoint, CurveReport, CurveSplit, LassoConfig};
use prunekit::netir::{count_flops, load_model, save_model, NetworkIR};
use prunekit::probe::{fit_probe, transfer_matrix, PrimarySource, Split, TaskKind, TaskSpec};
use prunekit::pruner::{
    build_pruned_network, compression_report, finetune as finetune_net, inference_time, plan_from_curves,
    pruning_knee, select_truncation_layer, CompressionReport, FinetuneConfig, PrunePlan,
};
use prunekit::synthfaces::{
    generate_to_dir, make_primary_net, Arch, AttributeCorrelation, PrimaryConfig, PrimaryError, SynthSpec,
};
use prunekit::tensor::Tensor;
use serde::Serialize;

use crate::args::*;
use crate::error::CliError;
use crate::manifest::Recorder;
use crate::tasks;

pub const MODEL_FILE: &str = "model.pkn";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize, rec: &mut Recorder) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("outputs serialize");
    fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    rec.output(path);
    Ok(())
}

fn load_data(path: &Path, rec: &mut Recorder) -> Result<Dataset, CliError> {
    let d = Dataset::load_dir(path)?;
    rec.input(path);
    info!("loaded {} images from {}", d.len(), path.display());
    Ok(d)
}

fn load_net(path: &Path, rec: &mut Recorder) -> Result<NetworkIR, CliError> {
    let net = load_model(path)?;
    rec.input(path);
    Ok(net)
}

fn save_net(net: &NetworkIR, path: &Path, rec: &mut Recorder) -> Result<(), CliError> {
    save_model(net, path)?;
    rec.output(path);
    Ok(())
}

fn check_split(s: &Split) -> Result<(), CliError> {
    let parts = [s.train, s.val, s.test];
    if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || s.train <= 0.0 {
        return Err(CliError::Config("split fractions must be finite, non-negative, with train > 0".into()));
    }
    Ok(())
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn with_targets(mut f: FeatureMatrix, data: &Dataset) -> FeatureMatrix {
    f.targets = data.columns.clone();
    f
}

fn layers_or_all(net: &NetworkIR, layers: &[String]) -> Vec<String> {
    if layers.is_empty() {
        net.filter_layers()
    } else {
        layers.to_vec()
    }
}

fn column_f64(data: &Dataset, column: &str) -> Result<Vec<f64>, CliError> {
    Ok(data.column(column)?.iter().map(|&v| v as f64).collect())
}

/// RMSE of a single-output network against `y` on `rows`.
fn network_rmse(net: &NetworkIR, images: &Tensor, y: &[f64], rows: &[usize]) -> Result<f64, CliError> {
    if rows.is_empty() {
        return Err(CliError::Config("no rows to evaluate on".into()));
    }
    let (out, _) = forward(net, &images.gather_rows(rows), &[])?;
    if out.row_len() != 1 {
        return Err(CliError::Input(format!("network emits {} values per image, expected 1", out.row_len())));
    }
    let s: f64 = out
        .data()
        .iter()
        .zip(rows)
        .map(|(&p, &i)| (p as f64 - y[i]).powi(2))
        .sum();
    Ok((s / rows.len() as f64).sqrt())
}

fn parse_correlation(s: &str) -> Result<AttributeCorrelation, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Config(format!("correlation `{s}` is not `a:b:rho`"));
    let [a, b, rho] = parts.as_slice() else {
        return Err(bad());
    };
    Ok(AttributeCorrelation {
        a: a.to_string(),
        b: b.to_string(),
        rho: rho.parse().map_err(|_| bad())?,
    })
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => SynthSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.primary_count {
        spec.primary_count = v;
    }
    if let Some(v) = a.satellite_count {
        spec.satellite_count = v;
    }
    if let Some(v) = a.identities {
        spec.identities = v;
    }
    if let Some(v) = a.size {
        spec.height = v;
        spec.width = v;
    }
    if a.pose_grid.is_some() {
        spec.pose_grid_step = a.pose_grid;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    for c in &a.correlations {
        spec.correlations.push(parse_correlation(c)?);
    }
    spec.validate()?;
    let mut rec = Recorder::new("synth", &spec);
    if let Some(p) = &a.spec {
        rec.input(p);
    }
    create_dir(&a.out)?;
    let data = generate_to_dir(&spec, &a.out)?;
    info!(
        "wrote {} primary and {} satellite images to {}",
        data.primary.len(),
        data.satellite.len(),
        a.out.display()
    );
    for name in ["spec.json", "primary", "satellite"] {
        rec.output(&a.out.join(name));
    }
    rec.finish(&a.out)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let arch = match a.arch {
        ArchArg::Vgg => Arch::Vgg,
        ArchArg::LightCnn => Arch::LightCnn,
    };
    let mut cfg = PrimaryConfig::for_arch(arch);
    cfg.task = a.task.clone();
    cfg.seed = a.seed;
    cfg.train.seed = a.seed;
    if let Some(w) = &a.widths {
        cfg.widths = w
            .as_slice()
            .try_into()
            .map_err(|_| CliError::Config("--widths takes exactly three values".into()))?;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.min_accuracy {
        cfg.min_accuracy = v;
    }
    if a.untrained {
        cfg.train.epochs = 0;
    }
    let mut rec = Recorder::new("train", &cfg);
    let data = load_data(&a.data, &mut rec)?;
    create_dir(&a.out)?;
    let history_path = a.out.join("history.csv");
    let write_history = |h| write_history_csv(h, &history_path).map_err(|e| CliError::Input(e.to_string()));
    let outcome = match make_primary_net(&data, &cfg) {
        Ok(o) => o,
        Err(PrimaryError::NotConverged {
            accuracy,
            required,
            history,
        }) => {
            write_history(&history)?;
            return Err(CliError::Numerical(format!(
                "training reached accuracy {accuracy:.4}, below the required {required}; history in {}",
                history_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    info!("train accuracy {:.4}", outcome.train_accuracy);
    write_history(&outcome.history)?;
    rec.output(&history_path);
    save_net(&outcome.net, &a.out.join(MODEL_FILE), &mut rec)?;
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct ProbeRow {
    layer: String,
    task: String,
    train: prunekit::probe::Evaluation,
    val: Option<prunekit::probe::Evaluation>,
    test: Option<prunekit::probe::Evaluation>,
    thresholds: Vec<f64>,
    model: PathBuf,
}

pub fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let split = a.split.split();
    check_split(&split)?;
    let mut rec = Recorder::new("probe", &a);
    let net = load_net(&a.model, &mut rec)?;
    let data = load_data(&a.data, &mut rec)?;
    let tasks = tasks::resolve(&a.tasks, &data)?;
    if let Some(p) = &a.tasks.tasks_file {
        rec.input(p);
    }
    let layers = layers_or_all(&net, &a.layers);
    let names: Vec<&str> = layers.iter().map(String::as_str).collect();
    let feats = extract_many(&net, &data.images, &names, Statistic::Gap)?;
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for f in feats {
        let f = with_targets(f, &data);
        for t in &tasks {
            let fit = fit_probe(&f, t, &split)?;
            let path = a.out.join(format!("probe_{}_{}.pkp", file_safe(&f.layer), file_safe(&t.name)));
            fit.model.to_archive().save(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            rec.output(&path);
            let shown = fit.test.or(fit.val).unwrap_or(fit.train);
            info!(
                "{} / {}: rmse {:.4}{}",
                f.layer,
                t.name,
                shown.rmse,
                shown.accuracy.map(|x| format!(", accuracy {x:.4}")).unwrap_or_default()
            );
            rows.push(ProbeRow {
                layer: f.layer.clone(),
                task: t.name.clone(),
                train: fit.train,
                val: fit.val,
                test: fit.test,
                thresholds: fit.model.thresholds.clone(),
                model: path,
            });
        }
    }
    write_json(&a.out.join("probes.json"), &rows, &mut rec)?;
    rec.finish(&a.out)?;
    Ok(())
}

pub fn matrix(a: MatrixArgs) -> Result<(), CliError> {
    let split = a.split.split();
    check_split(&split)?;
    let mut rec = Recorder::new("matrix", &a);
    let data = load_data(&a.data, &mut rec)?;
    let tasks = tasks::resolve(&a.tasks, &data)?;
    let mut sources = Vec::new();
    for m in &a.models {
        let (name, path) = match m.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(m);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (stem, p)
            }
        };
        let net = load_net(&path, &mut rec)?;
        let layer = match &a.layer {
            Some(l) => l.clone(),
            None => net
                .filter_layers()
                .pop()
                .ok_or_else(|| CliError::Input(format!("{} has no conv or MFM layer", path.display())))?,
        };
        let features = with_targets(extract_gap(&net, &data.images, &layer)?, &data);
        sources.push(PrimarySource {
            name,
            primary_task: net.primary_task.clone(),
            features,
        });
    }
    let tm = transfer_matrix(&sources, &tasks, &split);
    for e in &tm.errors {
        warn!("{e}");
    }
    create_dir(&a.out)?;
    let csv_path = a.out.join("matrix.csv");
    tm.write_csv(&csv_path).map_err(|e| CliError::Input(e.to_string()))?;
    rec.output(&csv_path);
    write_json(&a.out.join("matrix.json"), &tm, &mut rec)?;
    rec.finish(&a.out)?;
    Ok(())
}

fn check_gammas(g: &[f64]) -> Result<(), CliError> {
    if g.is_empty() || g.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(CliError::Config("gamma values must lie in (0, 1)".into()));
    }
    Ok(())
}

pub fn curve(a: CurveArgs) -> Result<(), CliError> {
    check_gammas(&a.gamma)?;
    let split = a.split.split();
    check_split(&split)?;
    if !(a.heldout >= 0.0 && a.heldout < 1.0) {
        return Err(CliError::Config("--heldout must lie in [0, 1)".into()));
    }
    let mut rec = Recorder::new("curve", &a);
    let net = load_net(&a.model, &mut rec)?;
    let data = load_data(&a.data, &mut rec)?;
    data.column(&a.target)?;
    let layers = layers_or_all(&net, &a.layers);
    let names: Vec<&str> = layers.iter().map(String::as_str).collect();
    let stat = match a.statistic {
        StatArg::Gap => Statistic::Gap,
        StatArg::L2 => Statistic::L2Norm,
    };
    let feats = extract_many(&net, &data.images, &names, stat)?;
    let cfg = LassoConfig {
        count: a.count,
        ratio: a.ratio,
        ..LassoConfig::default()
    };
    let cs = CurveSplit {
        heldout: a.heldout,
        seed: a.seed,
    };
    create_dir(&a.out)?;
    let mut first = None;
    for f in feats {
        let f = with_targets(f, &data);
        let curve = characteristic_curve(&f, &a.target, &cs, &cfg)?;
        let knees = a
            .gamma
            .iter()
            .map(|&g| kneepoint(&curve, g))
            .collect::<Result<Vec<_>, _>>()?;
        for k in &knees {
            info!("{}: gamma {} -> {} filters, rmse {:.4}", f.layer, k.gamma, k.nnz, k.rmse);
        }
        let stem = format!("curve_{}", file_safe(&f.layer));
        let csv_path = a.out.join(format!("{stem}.csv"));
        curve.write_csv(&csv_path)?;
        rec.output(&csv_path);
        write_json(&a.out.join(format!("{stem}.json")), &CurveReport { curve, knees }, &mut rec)?;
        first.get_or_insert(f);
    }
    if let Some(f) = first {
        let task = TaskSpec::new(
            a.target.clone(),
            TaskKind::Regression {
                column: a.target.clone(),
            },
        );
        let choice = select_truncation_layer(&net, &data.images, &f, &task, &names, &split)?;
        info!("lowest probe error at {}", choice.layer);
        write_json(&a.out.join("truncation.json"), &choice, &mut rec)?;
    }
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct KneeRow {
    source: PathBuf,
    layer: String,
    target: String,
    /// Knees of the full curve.
    knees: Vec<prunekit::lassopath::KneePoint>,
    /// Knees restricted to nonempty supports, as used for pruning.
    pruning: Vec<prunekit::lassopath::KneePoint>,
}

pub fn knee(a: KneeArgs) -> Result<(), CliError> {
    check_gammas(&a.gamma)?;
    let mut rec = Recorder::new("knee", &a);
    let mut rows = Vec::new();
    for p in &a.curves {
        let report: CurveReport = read_json(p)?;
        rec.input(p);
        let c = &report.curve;
        let knees = a
            .gamma
            .iter()
            .map(|&g| kneepoint(c, g))
            .collect::<Result<Vec<_>, _>>()?;
        let pruning = a
            .gamma
            .iter()
            .map(|&g| pruning_knee(c, g))
            .collect::<Result<Vec<_>, _>>()?;
        for k in &knees {
            info!("{}: gamma {} -> {} filters", c.layer, k.gamma, k.nnz);
        }
        rows.push(KneeRow {
            source: p.clone(),
            layer: c.layer.clone(),
            target: c.target.clone(),
            knees,
            pruning,
        });
    }
    create_dir(&a.out)?;
    write_json(&a.out.join("knees.json"), &rows, &mut rec)?;
    rec.finish(&a.out)?;
    Ok(())
}

/// Curve whose best held-out error is lowest; near-ties go to the deeper
/// layer.
fn best_curve_layer(net: &NetworkIR, curves: &[prunekit::lassopath::CharacteristicCurve]) -> Result<String, CliError> {
    let mut scored = Vec::new();
    for c in curves {
        let idx = net.layer_index(&c.layer)?;
        if prunekit::pruner::opens_group(net, idx) {
            continue;
        }
        let best = (0..c.fits.len()).map(|k| c.rmse(k)).fold(f64::INFINITY, f64::min);
        scored.push((idx, best, c.layer.clone()));
    }
    scored.sort_by_key(|s| s.0);
    let min = scored.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    scored
        .into_iter()
        .rev()
        .find(|s| s.1 - min <= 1e-9)
        .map(|s| s.2)
        .ok_or_else(|| CliError::Config("no curves given".into()))
}

#[derive(Serialize)]
struct Counts<'a> {
    before: &'a prunekit::netir::CountReport,
    after: &'a prunekit::netir::CountReport,
}

pub fn prune(a: PruneArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("prune", &a);
    let net = load_net(&a.model, &mut rec)?;
    let plan: PrunePlan = if let Some(p) = &a.plan {
        rec.input(p);
        read_json(p)?
    } else if !a.curves.is_empty() {
        check_gammas(&[a.gamma])?;
        let mut curves = Vec::new();
        for p in &a.curves {
            let r: CurveReport = read_json(p)?;
            rec.input(p);
            curves.push(r.curve);
        }
        let truncation = match &a.truncation {
            Some(t) => t.clone(),
            None => best_curve_layer(&net, &curves)?,
        };
        plan_from_curves(&net, &truncation, &curves, a.gamma)?
    } else {
        return Err(CliError::Config("give either --plan or at least one --curve".into()));
    };
    let pruned = build_pruned_network(&net, &plan)?;
    let r = pruned.after.reduction_vs(&pruned.before);
    info!(
        "params {} -> {} ({:.2}% smaller), flops {} -> {} ({:.2}% fewer)",
        pruned.before.total_params,
        pruned.after.total_params,
        100.0 * r.params,
        pruned.before.total_flops,
        pruned.after.total_flops,
        100.0 * r.flops
    );
    create_dir(&a.out)?;
    save_net(&pruned.net, &a.out.join(MODEL_FILE), &mut rec)?;
    write_json(&a.out.join("plan.json"), &plan, &mut rec)?;
    write_json(
        &a.out.join("counts.json"),
        &Counts {
            before: &pruned.before,
            after: &pruned.after,
        },
        &mut rec,
    )?;
    rec.finish(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct FinetuneSummary {
    target: String,
    best_epoch: usize,
    eval_rows: usize,
    rmse_before: f64,
    rmse_after: f64,
}

fn eval_rows(idx: &prunekit::probe::SplitIndices) -> &[usize] {
    if idx.test.is_empty() {
        &idx.val
    } else {
        &idx.test
    }
}

pub fn finetune(a: FinetuneArgs) -> Result<(), CliError> {
    let split = a.split.split();
    check_split(&split)?;
    let cfg = FinetuneConfig {
        refit_head: !a.no_refit,
        train: TrainConfig {
            lr: a.lr,
            momentum: a.momentum,
            epochs: a.epochs,
            batch_size: a.batch_size,
            seed: a.seed,
            loss: LossKind::Mse,
            keep_best: true,
            ..TrainConfig::default()
        },
    };
    let mut rec = Recorder::new("finetune", &(&a, &cfg));
    let net = load_net(&a.model, &mut rec)?;
    let data = load_data(&a.data, &mut rec)?;
    let y = column_f64(&data, &a.target)?;
    let idx = split.indices(data.len());
    if idx.val.is_empty() {
        return Err(CliError::Config("finetuning needs a non-empty validation split".into()));
    }
    let batch = |rows: &[usize]| Batch {
        images: data.images.gather_rows(rows),
        targets: Targets::Regression {
            values: rows.iter().map(|&i| y[i]).collect(),
            dim: 1,
        },
    };
    let held = eval_rows(&idx);
    let rmse_before = network_rmse(&net, &data.images, &y, held)?;
    let out = finetune_net(&net, &batch(&idx.train), &batch(&idx.val), &cfg)?;
    let rmse_after = network_rmse(&out.net, &data.images, &y, held)?;
    info!("held-out rmse {rmse_before:.4} -> {rmse_after:.4} (best epoch {})", out.best_epoch);
    create_dir(&a.out)?;
    save_net(&out.net, &a.out.join(MODEL_FILE), &mut rec)?;
    let hist = a.out.join("history.csv");
    write_history_csv(&out.history, &hist).map_err(|e| CliError::Input(e.to_string()))?;
    rec.output(&hist);
    write_json(
        &a.out.join("finetune.json"),
        &FinetuneSummary {
            target: a.target.clone(),
            best_epoch: out.best_epoch,
            eval_rows: held.len(),
            rmse_before,
            rmse_after,
        },
        &mut rec,
    )?;
    rec.finish(&a.out)?;
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<(), CliError> {
    let split = a.split.split();
    check_split(&split)?;
    let mut rec = Recorder::new("report", &a);
    let original = load_net(&a.original, &mut rec)?;
    let pruned = load_net(&a.pruned, &mut rec)?;
    let data = load_data(&a.data, &mut rec)?;
    let y = column_f64(&data, &a.target)?;
    let layer = match pruned.metadata.get("truncated_at") {
        Some(l) => l.clone(),
        None => original
            .filter_layers()
            .pop()
            .ok_or_else(|| CliError::Input("original network has no conv or MFM layer".into()))?,
    };
    let task = TaskSpec::new(
        a.target.clone(),
        TaskKind::Regression {
            column: a.target.clone(),
        },
    );
    let f = with_targets(extract_gap(&original, &data.images, &layer)?, &data);
    let fit = fit_probe(&f, &task, &split)?;
    let rmse_before = fit.test.or(fit.val).unwrap_or(fit.train).rmse;
    let rmse_after = network_rmse(&pruned, &data.images, &y, eval_rows(&fit.split))?;
    let before = count_flops(&original, original.input_shape)?;
    let after = count_flops(&pruned, pruned.input_shape)?;
    let timing = if a.no_timing {
        None
    } else {
        let one = data.images.gather_rows(&[0]);
        Some((inference_time(&original, &one)?, inference_time(&pruned, &one)?))
    };
    let row = compression_report(
        a.attribute.as_deref().unwrap_or(&a.target),
        a.arch.as_deref().unwrap_or(&original.name),
        &before,
        &after,
        Some(rmse_before),
        Some(rmse_after),
        timing,
    )?;
    info!(
        "rmse {rmse_before:.4} -> {rmse_after:.4}, {:.2}% fewer flops, {:.2}% smaller",
        row.flop_reduction_pct, row.size_reduction_pct
    );
    let table = CompressionReport::new(vec![row])?;
    create_dir(&a.out)?;
    let csv_path = a.out.join("report.csv");
    table.write_csv(&csv_path)?;
    rec.output(&csv_path);
    write_json(&a.out.join("report.json"), &table, &mut rec)?;
    rec.finish(&a.out)?;
    Ok(())
}
