use std::path::Path;
use std::process::{Command, Output};

use dtinet::quality::EvalReport;

fn dtinet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtinet"))
        .current_dir(dir)
        .env_remove("DTINET_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = dtinet(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL_ABLATION: &str = r#"
modes = ["A"]
seeds = [1]
lambda_grid = [0.2]

[data]
dims = [12, 12, 12]
full_directions = 30
subsample_restarts = 2

[data.split]
block_size = 4

[train]
epochs = 2
hidden = [8]
"#;

#[test]
fn unknown_flag_exits_1_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dtinet(dir.path(), &["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("ERROR[1]:"));
    assert!(err.contains("Usage"));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dtinet(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn noiseless_fit_matches_analytic_maps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "field", "--dims", "12", "--directions", "6", "--dwi", "dwi", "--maps", "gt", "--dtype", "f64"]);
    ok(d, &["fit", "--in", "dwi", "--out", "fit", "--dtype", "f64"]);
    ok(d, &["eval", "--pred", "fit", "--gt", "gt", "--out", "report.json", "--normalization", "1,1,1"]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for m in &report.metrics {
        assert!(m.mse < 1e-12, "{:?}: {}", m.metric, m.mse);
    }
}

#[test]
fn eval_of_identical_maps_reports_ssim_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "field", "--dims", "12", "--maps", "gt"]);
    ok(d, &["eval", "--pred", "gt", "--gt", "gt", "--out", "report.json", "--table", "table.md", "--label", "same"]);
    let table = std::fs::read_to_string(d.join("table.md")).unwrap();
    let row = table.lines().find(|l| l.starts_with("| same")).unwrap();
    let cells: Vec<&str> = row.split('|').map(str::trim).collect();
    assert!(cells.iter().filter(|c| **c == "1.000").count() >= 3, "{row}");
    assert!(row.contains("inf"), "{row}");
}

#[test]
fn pipeline_writes_manifests_that_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "field", "--dims", "12", "--directions", "30", "--dwi", "full", "--maps", "gt"]);
    ok(d, &["noise", "--in", "full", "--out", "noisy", "--sigma", "0.025", "--seed", "2"]);
    ok(d, &["subsample", "--in", "noisy", "--out", "sparse", "-k", "6"]);
    for f in ["sparse.selection.json", "sparse.bval", "sparse.bvec", "sparse.manifest.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    ok(d, &["train", "--input", "sparse", "--gt", "gt", "--out", "model", "--epochs", "2", "--set", "train.hidden=[8]", "--set", "data.split.block_size=4"]);
    ok(d, &["infer", "--model", "model", "--in", "sparse", "--out", "pred"]);
    ok(d, &["render", "--in", "pred_fa", "--slice", "6", "--out", "fa.pgm", "--reference", "gt_fa", "--residual-out", "res.pgm"]);
    for m in ["field", "noisy", "sparse", "model", "pred", "fa"] {
        ok(d, &["verify", &format!("{m}.manifest.json")]);
    }
    let pgm = std::fs::read(d.join("fa.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n12 12\n65535\n"));
    std::fs::write(d.join("fa.pgm"), b"changed").unwrap();
    assert_eq!(dtinet(d, &["verify", "fa.manifest.json"]).status.code(), Some(1));
}

#[test]
fn out_of_bounds_slice_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "field", "--dims", "8", "--maps", "gt"]);
    let out = dtinet(d, &["render", "--in", "gt_fa", "--slice", "8", "--out", "fa.pgm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR[1]:"));
    assert!(!d.join("fa.pgm").exists());
    assert!(!d.join("fa.manifest.json").exists());
}

#[test]
fn direction_mismatch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "field", "--dims", "12", "--directions", "30", "--dwi", "full", "--maps", "gt"]);
    ok(d, &["subsample", "--in", "full", "--out", "sparse", "-k", "6"]);
    ok(d, &["train", "--input", "sparse", "--gt", "gt", "--out", "model", "--epochs", "1", "--set", "train.hidden=[4]", "--set", "data.split.block_size=4"]);
    let out = dtinet(d, &["infer", "--model", "model", "--in", "full", "--out", "pred"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('7') && err.contains("31"), "{err}");
}

#[test]
fn divergence_exits_2_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "field", "--dims", "12", "--directions", "30", "--dwi", "full", "--maps", "gt"]);
    ok(d, &["subsample", "--in", "full", "--out", "sparse", "-k", "6"]);
    let out = dtinet(
        d,
        &["train", "--input", "sparse", "--gt", "gt", "--out", "model", "--epochs", "3", "--lr", "1e300", "--set", "train.hidden=[4]", "--set", "data.split.block_size=4"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR[2]:"));
    assert!(d.join("model.ckpt.json").exists());
    assert!(d.join("model.history.jsonl").exists());
}

#[test]
fn ablate_single_mode_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("abl.toml"), SMALL_ABLATION).unwrap();
    ok(d, &["--threads", "1", "ablate", "--config", "abl.toml", "--out", "run"]);
    let table = std::fs::read_to_string(d.join("run/table.md")).unwrap();
    let rows = table.lines().filter(|l| l.starts_with("| (")).count();
    assert_eq!(rows, 1, "{table}");
    assert!(d.join("run/history_A.jsonl").exists());
    assert!(!d.join("run/history_B.jsonl").exists());
    ok(d, &["verify", "run/manifest.json"]);
}

#[test]
fn bad_config_key_exits_1_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = dtinet(d, &["ablate", "--set", "train.epochz=2", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("run").exists());
}
