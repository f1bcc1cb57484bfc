//! Scaled-down end-to-end scenarios shared by the pipeline tests.

use std::time::Instant;

use prunekit::engine::{forward, Batch, Targets};
use prunekit::features::{extract_gap, extract_many, FeatureMatrix, Statistic};
use prunekit::lassopath::{characteristic_curve, CurveSplit, LassoConfig};
use prunekit::netir::NetworkIR;
use prunekit::probe::{fit_probe, Split, TaskKind, TaskSpec};
use prunekit::pruner::{build_pruned_network, finetune, plan_from_curves, select_truncation_layer, FinetuneConfig};
use prunekit::synthfaces::{generate, make_primary_net, Arch, PrimaryConfig, SynthData, SynthSpec};
use prunekit::Tensor;
use rand::RngExt;

use super::{normal, rng};

pub fn synth(seed: u64, primary: usize, satellite: usize) -> SynthData {
    generate(&SynthSpec {
        seed,
        primary_count: primary,
        satellite_count: satellite,
        ..SynthSpec::default()
    })
    .unwrap()
}

pub fn primary_net(data: &SynthData, arch: Arch, seed: u64, epochs: Option<usize>) -> NetworkIR {
    let mut cfg = PrimaryConfig::for_arch(arch);
    cfg.seed = seed;
    cfg.min_accuracy = 0.5;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        if e == 0 {
            cfg.min_accuracy = 0.0;
        }
    }
    make_primary_net(&data.primary, &cfg).unwrap().net
}

/// Target that is a noisy linear function of `s` live filters of `layer`.
pub fn planted_target(net: &NetworkIR, images: &Tensor, layer: &str, s: usize, noise: f64, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let f = extract_gap(net, images, layer).unwrap();
    let n = f.rows();
    let stats: Vec<(f64, f64)> = (0..f.cols())
        .map(|j| {
            let c: Vec<f64> = f.column(j).iter().map(|&v| v as f64).collect();
            let m = c.iter().sum::<f64>() / n as f64;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            (m, sd)
        })
        .collect();
    let mut r = rng(seed);
    let mut live: Vec<usize> = (0..f.cols()).filter(|&j| stats[j].1 > 1e-4).collect();
    rand::seq::SliceRandom::shuffle(live.as_mut_slice(), &mut r);
    live.truncate(s);
    live.sort_unstable();
    let w: Vec<f64> = live.iter().map(|_| r.random_range(1.0..2.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let y = (0..n)
        .map(|i| {
            let signal: f64 = live
                .iter()
                .zip(&w)
                .map(|(&j, wj)| wj * (f.get(i, j) as f64 - stats[j].0) / stats[j].1)
                .sum();
            (10.0 * (signal + noise * normal(&mut r))) as f32
        })
        .collect();
    (y, live)
}

#[derive(Debug, Clone)]
pub struct Compression {
    pub truncation: String,
    pub params_pct: f64,
    pub flops_pct: f64,
    pub probe_rmse: f64,
    pub pruned_rmse: f64,
    pub finetuned_rmse: f64,
    pub seconds: f64,
    pub pruned: NetworkIR,
}

fn rmse(net: &NetworkIR, images: &Tensor, y: &[f64]) -> f64 {
    let (out, _) = forward(net, images, &[]).unwrap();
    let s: f64 = out.data().iter().zip(y).map(|(&p, t)| (p as f64 - t).powi(2)).sum();
    (s / y.len() as f64).sqrt()
}

/// Truncate, prune every filter layer at or below the truncation layer at
/// its knee, finetune, and score on the held-out test rows.
pub fn compress(net: &NetworkIR, images: &Tensor, y: &[f32], gamma: f64, seed: u64, cfg: &FinetuneConfig) -> Compression {
    let t0 = Instant::now();
    let split = Split {
        train: 0.5,
        val: 0.25,
        test: 0.25,
        seed,
    };
    let n = y.len();
    let idx = split.indices(n);
    let dev: Vec<usize> = idx.train.iter().chain(&idx.val).copied().collect();
    let dev_images = images.gather_rows(&dev);
    let dev_y: Vec<f32> = dev.iter().map(|&i| y[i]).collect();

    let names = net.filter_layers();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let curves: Vec<_> = extract_many(net, &dev_images, &refs, Statistic::Gap)
        .unwrap()
        .into_iter()
        .map(|f| {
            let f = f.with_target("y", dev_y.clone()).unwrap();
            characteristic_curve(&f, "y", &CurveSplit { heldout: 0.25, seed }, &LassoConfig::default()).unwrap()
        })
        .collect();

    let task = TaskSpec::new("y", TaskKind::Regression { column: "y".into() });
    let targets = FeatureMatrix::new("y", vec![0], dev_y.clone()).unwrap().with_target("y", dev_y.clone()).unwrap();
    let inner = Split { seed, ..Split::default() };
    let choice = select_truncation_layer(net, &dev_images, &targets, &task, &refs, &inner).unwrap();

    let plan = plan_from_curves(net, &choice.layer, &curves, gamma).unwrap();
    let pruned = build_pruned_network(net, &plan).unwrap();
    let red = pruned.after.reduction.clone().unwrap();

    let batch = |rows: &[usize]| Batch {
        images: images.gather_rows(rows),
        targets: Targets::Regression {
            values: rows.iter().map(|&i| y[i] as f64).collect(),
            dim: 1,
        },
    };
    let tuned = finetune(&pruned.net, &batch(&idx.train), &batch(&idx.val), cfg).unwrap().net;

    let test_images = images.gather_rows(&idx.test);
    let test_y: Vec<f64> = idx.test.iter().map(|&i| y[i] as f64).collect();
    let probe_f = extract_gap(net, images, &choice.layer).unwrap().with_target("y", y.to_vec()).unwrap();
    let probe = fit_probe(&probe_f, &task, &split).unwrap();

    Compression {
        truncation: choice.layer,
        params_pct: red.params,
        flops_pct: red.flops,
        probe_rmse: probe.test.unwrap().rmse,
        pruned_rmse: rmse(&pruned.net, &test_images, &test_y),
        finetuned_rmse: rmse(&tuned, &test_images, &test_y),
        seconds: t0.elapsed().as_secs_f64(),
        pruned: tuned,
    }
}
