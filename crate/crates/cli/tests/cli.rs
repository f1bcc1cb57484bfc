use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use prunekit::dataset::Dataset;
use prunekit::features::extract_gap;
use prunekit::netir::load_model;
use prunekit::pruner::PrunePlan;
use serde_json::Value;

fn prunekit(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_prunekit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64, satellite: usize) -> PathBuf {
    let out = dir.join(format!("synth{seed}"));
    let seed = seed.to_string();
    let satellite = satellite.to_string();
    let code = prunekit(&[
        "synth", "--out", s(&out), "--seed", &seed, "--primary-count", "96", "--satellite-count", &satellite,
        "--identities", "4",
    ]);
    assert_eq!(code, 0);
    out
}

fn untrained(dir: &Path, data: &Path) -> PathBuf {
    let out = dir.join("untrained");
    assert_eq!(prunekit(&["train", "--data", s(&data.join("primary")), "--out", s(&out), "--untrained"]), 0);
    out.join("model.pkn")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn mean_sd(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Deterministic, roughly unit-variance noise: a sum of twelve hashed
/// uniforms.
fn noise(i: usize) -> f64 {
    (0..12u64)
        .map(|k| {
            let mut h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            h ^= h >> 31;
            h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
            h ^= h >> 29;
            (h >> 11) as f64 / (1u64 << 53) as f64
        })
        .sum::<f64>()
        - 6.0
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 3, 16);
    let b = dir.path().join("again");
    fs::create_dir(&b).unwrap();
    let b = synth(&b, 3, 16);
    for sub in ["primary/labels.csv", "satellite/labels.csv", "satellite/images/00007.pgm"] {
        assert_eq!(fs::read(a.join(sub)).unwrap(), fs::read(b.join(sub)).unwrap(), "{sub}");
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["command"], "synth");
    assert!(!m["outputs"].as_array().unwrap().is_empty());
}

#[test]
fn keep_all_plan_leaves_the_model_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1, 8);
    let model = untrained(dir.path(), &data);
    let plan = dir.path().join("plan.json");
    fs::write(&plan, serde_json::to_string(&PrunePlan::keep_all()).unwrap()).unwrap();
    let out = dir.path().join("pruned");
    assert_eq!(prunekit(&["prune", "--model", s(&model), "--plan", s(&plan), "--out", s(&out)]), 0);
    let before = load_model(&model).unwrap();
    let after = load_model(&out.join("model.pkn")).unwrap();
    assert!(after.bit_eq(&before));
    let counts = json(&out.join("counts.json"));
    for key in ["total_params", "total_flops", "per_layer"] {
        assert_eq!(counts["before"][key], counts["after"][key]);
    }
    assert_eq!(counts["after"]["reduction"]["params"], 0.0);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 8);
    let primary = data.join("primary");
    let model = untrained(dir.path(), &data);
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.pkn");

    assert_eq!(prunekit(&["probe", "--model", s(&missing), "--data", s(&primary), "--task", "hat", "--out", s(&out)]), 3);
    let garbage = dir.path().join("garbage.pkn");
    fs::write(&garbage, b"not a model").unwrap();
    assert_eq!(prunekit(&["probe", "--model", s(&garbage), "--data", s(&primary), "--task", "hat", "--out", s(&out)]), 3);

    assert_eq!(
        prunekit(&["curve", "--model", s(&model), "--data", s(&primary), "--target", "yaw", "--gamma", "1.5", "--out", s(&out)]),
        2
    );
    assert_eq!(
        prunekit(&["curve", "--model", s(&model), "--data", s(&primary), "--target", "nosuch", "--out", s(&out)]),
        2
    );
    assert_eq!(
        prunekit(&["probe", "--model", s(&model), "--data", s(&primary), "--layer", "nosuch", "--task", "hat", "--out", s(&out)]),
        2
    );
    assert_eq!(prunekit(&["--threads", "0", "synth", "--out", s(&out)]), 2);

    let code = prunekit(&[
        "train", "--data", s(&primary), "--out", s(&out), "--epochs", "1", "--min-accuracy", "1.01",
    ]);
    assert_eq!(code, 4);
    assert!(out.join("history.csv").exists());
}

#[test]
fn pruning_keeps_a_planted_support() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 600);
    let model = untrained(dir.path(), &data);
    let sat = Dataset::load_dir(&data.join("satellite")).unwrap();
    let net = load_model(&model).unwrap();
    let f = extract_gap(&net, &sat.images, "conv3").unwrap();
    let stats: Vec<(f64, f64)> = (0..f.cols()).map(|j| mean_sd(&f.column(j))).collect();
    let live: Vec<usize> = (0..f.cols()).filter(|&j| stats[j].1 > 1e-3).collect();
    let support = [live[0], live[live.len() / 3], live[2 * live.len() / 3], live[live.len() - 1]];
    let y: Vec<f32> = (0..f.rows())
        .map(|i| {
            let signal: f64 = support.iter().map(|&j| (f.get(i, j) as f64 - stats[j].0) / stats[j].1).sum();
            (signal + 0.5 * noise(i)) as f32
        })
        .collect();
    let mut columns = sat.columns.clone();
    columns.push(("planted".into(), y));
    let planted = dir.path().join("planted");
    Dataset::new(sat.images.clone(), columns).unwrap().save_dir(&planted).unwrap();

    let curves = dir.path().join("curves");
    let code = prunekit(&[
        "curve", "--model", s(&model), "--data", s(&planted), "--layer", "conv3", "--target", "planted", "--out",
        s(&curves),
    ]);
    assert_eq!(code, 0);
    let knees = dir.path().join("knees");
    let curve = curves.join("curve_conv3.json");
    assert_eq!(prunekit(&["knee", "--curve", s(&curve), "--gamma", "0.01", "--out", s(&knees)]), 0);
    let nnz = json(&knees.join("knees.json"))[0]["pruning"][0]["nnz"].as_u64().unwrap() as usize;
    assert!((support.len()..=2 * support.len()).contains(&nnz), "knee keeps {nnz} filters");

    let pruned = dir.path().join("pruned");
    let code = prunekit(&["prune", "--model", s(&model), "--curve", s(&curve), "--out", s(&pruned)]);
    assert_eq!(code, 0);
    let plan: PrunePlan = serde_json::from_value(json(&pruned.join("plan.json"))).unwrap();
    assert_eq!(plan.truncation.as_deref(), Some("conv3"));
    let net = load_model(&pruned.join("model.pkn")).unwrap();
    assert_eq!(net.layer("conv3").unwrap().kind.conv().unwrap().out_channels, nnz);
    let kept: Vec<usize> = net.metadata["kept.conv3"].split(',').map(|v| v.parse().unwrap()).collect();
    assert!(support.iter().all(|j| kept.contains(&f.filter_ids[*j])), "{support:?} not within {kept:?}");
}
