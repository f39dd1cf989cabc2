use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrecg_core::{oscillation_score, Plan, ReconstructionReport};
use serde_json::Value;
use tempfile::TempDir;

fn mrecg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrecg"))
        .args(args)
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .expect("binary runs")
}

#[track_caller]
fn ok(args: &[&str]) -> Output {
    let out = mrecg(args);
    assert!(
        out.status.success(),
        "mrecg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 3-block model with a tiny calibration set.
fn small_model(dir: &Path) -> PathBuf {
    let out = dir.join("model");
    ok(&[
        "synth", "--out", s(&out), "--blocks", "3", "--channels", "4", "--hw", "4",
        "--calib-batch-size", "8", "--calib-batches", "2",
    ]);
    out
}

const QUICK: [&str; 6] = ["--iters", "30", "--batch-size", "8", "--num-batches", "2"];

/// `model.json` and `calib.bin` inside a `synth` output directory.
fn files(dir: &Path) -> (String, String) {
    let f = |name: &str| dir.join(name).to_str().unwrap().to_string();
    (f("model.json"), f("calib.bin"))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn csv_rows(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn synth_writes_identical_files_for_identical_flags() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["synth", "--out", s(dir), "--blocks", "4", "--channels", "4", "--hw", "4", "--seed", "9"]);
    }
    for name in ["model.json", "model.bin", "calib.bin", "synth.manifest.json"] {
        let fa = fs::read(a.join(name)).unwrap();
        let fb = fs::read(b.join(name)).unwrap();
        if name == "synth.manifest.json" {
            let strip = |v: &[u8]| String::from_utf8_lossy(v).replace(s(&a), "").replace(s(&b), "");
            assert_eq!(strip(&fa), strip(&fb));
        } else {
            assert_eq!(fa, fb, "{name} differs");
        }
    }
    let manifest = read_json(&a.join("synth.manifest.json"));
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let tmp = TempDir::new().unwrap();
    let out = mrecg(&["synth", "--out", s(tmp.path()), "--blocks", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:") && err.contains("--blocks"), "{err}");

    let out = mrecg(&["plan", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let out = mrecg(&["plan", "--model", s(&tmp.path().join("nope.json")), "--out", s(&tmp.path().join("p.json")), "--k", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("nope.json"), "{err}");
}

#[test]
fn plan_with_zero_k_is_the_zero_mask() {
    let tmp = TempDir::new().unwrap();
    let model = small_model(tmp.path());
    let plan_path = tmp.path().join("plans/p.json");
    ok(&["plan", "--model", s(&model.join("model.json")), "--out", s(&plan_path), "--k", "0"]);
    let plan = Plan::load(&plan_path).unwrap();
    assert_eq!(plan.mask, vec![0, 0]);
    assert_eq!(plan.k, 0);
    assert!(tmp.path().join("plans/p.manifest.json").exists());
    let raw = read_json(&plan_path);
    assert_eq!(raw["metric"], "modcap");
}

#[test]
fn loss_metric_requires_a_baseline_report() {
    let tmp = TempDir::new().unwrap();
    let model = small_model(tmp.path());
    let out = mrecg(&[
        "plan", "--model", s(&model.join("model.json")), "--out", s(&tmp.path().join("p.json")),
        "--k", "1", "--metric", "loss",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--baseline-report"));
}

#[test]
fn plan_on_bottleneck_model_merges_around_the_bottleneck() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m");
    ok(&["synth", "--out", s(&model), "--blocks", "8", "--bottleneck", "5", "--hw", "4", "--calib-batches", "1"]);
    let json = model.join("model.json");

    let free = tmp.path().join("free.json");
    ok(&["plan", "--model", s(&json), "--out", s(&free), "--k", "2"]);
    let plan = Plan::load(&free).unwrap();
    assert_eq!(plan.mask, vec![0, 0, 0, 0, 1, 0, 1]);
    assert_eq!(plan.k_achieved, Some(2));

    let dep = tmp.path().join("dep.json");
    ok(&["plan", "--model", s(&json), "--out", s(&dep), "--k", "2", "--mode", "data-dependent"]);
    assert_eq!(Plan::load(&dep).unwrap().mask, vec![0, 0, 0, 0, 1, 1, 0]);

    let out = mrecg(&["plan", "--model", s(&json), "--out", s(&dep), "--k", "8"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn quantize_without_plan_reconstructs_every_block_separately() {
    let tmp = TempDir::new().unwrap();
    let model = small_model(tmp.path());
    let out = tmp.path().join("q");
    let (json, calib) = files(&model);
    let mut args = vec!["quantize", "--model", &json, "--calib", &calib, "--out", s(&out)];
    args.extend(QUICK);
    ok(&args);
    let report = ReconstructionReport::load(&out.join("report.json")).unwrap();
    assert_eq!(report.modules.len(), 3);
    assert_eq!(report.scheme.selected(), 0);
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("module_index,iter,loss\n"));
    assert!(out.join("quantize.manifest.json").exists());
}

#[test]
fn quantize_rejects_undersized_calibration() {
    let tmp = TempDir::new().unwrap();
    let model = small_model(tmp.path());
    let out = mrecg(&[
        "quantize", "--model", s(&model.join("model.json")), "--calib", s(&model.join("calib.bin")),
        "--out", s(&tmp.path().join("q")), "--iters", "10",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = TempDir::new().unwrap();
    let model = small_model(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"iters": 20, "seed": 3, "batch_size": 8, "num_batches": 2, "fp-activations": true}"#).unwrap();
    let out = tmp.path().join("q");
    ok(&[
        "quantize", "--config", s(&cfg), "--model", s(&model.join("model.json")),
        "--calib", s(&model.join("calib.bin")), "--out", s(&out), "--seed", "5",
    ]);
    let manifest = read_json(&out.join("quantize.manifest.json"));
    assert_eq!(manifest["config"]["iters"], 20);
    assert_eq!(manifest["config"]["seed"], 5);
    assert_eq!(manifest["config"]["fp_activations"], true);
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn study_batch_writes_one_row_per_size() {
    let tmp = TempDir::new().unwrap();
    let model = small_model(tmp.path());
    let out = tmp.path().join("batch");
    ok(&[
        "study", "batch", "--model", s(&model.join("model.json")), "--out", s(&out), "--sizes", "4,8,16",
        "--seeds", "2", "--eval-samples", "16", "--iters", "20", "--num-batches", "2",
    ]);
    let rows = csv_rows(&out.join("batch_study.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("4,2,"));
    assert_eq!(read_json(&out.join("batch_study.json")).as_array().unwrap().len(), 3);

    let bad = mrecg(&["study", "batch", "--model", s(&model.join("model.json")), "--out", s(&out), "--sizes", "8,4"]);
    assert_ne!(bad.status.code(), Some(0));
}

#[test]
fn study_schemes_adds_the_zero_mask_row() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m");
    ok(&[
        "synth", "--out", s(&model), "--blocks", "4", "--channels", "4", "--hw", "4", "--calib-batch-size", "8",
        "--calib-batches", "2",
    ]);
    let out = tmp.path().join("schemes");
    let (json, calib) = files(&model);
    let mut args = vec![
        "study", "schemes", "--model", &json, "--calib", &calib, "--out", s(&out), "--samples", "30", "--k", "1..2",
    ];
    args.extend(["--iters", "10", "--batch-size", "8", "--num-batches", "2"]);
    ok(&args);
    let rows = csv_rows(&out.join("scheme_samples.csv"));
    assert_eq!(rows.len(), 31);
    assert!(rows[0].starts_with("0,000,0,"));
    let summary = read_json(&out.join("scheme_samples.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 31);
    assert!(summary.get("spearman").is_some());
}

#[test]
fn study_oscillation_scores_each_report() {
    let tmp = TempDir::new().unwrap();
    let model = small_model(tmp.path());
    let (json, calib) = files(&model);
    let mut reports = Vec::new();
    for seed in ["1", "2"] {
        let out = tmp.path().join(format!("q{seed}"));
        let mut args = vec!["quantize", "--model", &json, "--calib", &calib, "--out", s(&out), "--seed", seed];
        args.extend(QUICK);
        ok(&args);
        reports.push(out.join("report.json"));
    }
    let out = tmp.path().join("osc");
    ok(&["study", "oscillation", "--report", s(&reports[0]), "--report", s(&reports[1]), "--out", s(&out)]);

    let mut rdr = csv::Reader::from_path(out.join("oscillation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for (row, path) in rows.iter().zip(&reports) {
        let report = ReconstructionReport::load(path).unwrap();
        let expect = oscillation_score(&report.final_losses()).unwrap();
        assert_eq!(&row[0], s(path));
        assert_eq!(row[1].parse::<f64>().unwrap(), expect.score);
        assert_eq!(row[3].parse::<f64>().unwrap(), expect.max_loss);
    }
}
