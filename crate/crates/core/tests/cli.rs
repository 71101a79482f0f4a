//! Binary-level checks: exit codes (0 success, 1 usage/validation, 2
//! i/o-runtime) and the generate -> train -> eval -> explain round trip.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_staingraph")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin()).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn generate(dir: &Path) -> String {
    let out = dir.to_str().unwrap();
    let (code, stdout, stderr) = run(&[
        "generate",
        "--task",
        "planted",
        "--patients",
        "8",
        "--nodes-min",
        "5",
        "--nodes-max",
        "7",
        "--feature-dim",
        "4",
        "--signal-strength",
        "3",
        "--seed",
        "11",
        "--out",
        out,
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("16 patients"));
    dir.join("manifest.toml").to_str().unwrap().to_string()
}

#[test]
fn round_trip_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate(&tmp.path().join("data"));
    let train_dir = tmp.path().join("run");
    let train_out = train_dir.to_str().unwrap();

    let (code, stdout, stderr) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--out",
        train_out,
        "--seed",
        "11",
        "--layers",
        "2",
        "--hidden-dim",
        "8",
        "--pe-dim",
        "4",
        "--knn-k",
        "3",
        "--max-epochs",
        "2",
        "--folds",
        "2",
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("aggregate accuracy mean"));
    assert!(train_dir.join("report.txt").is_file());
    assert!(train_dir.join("fold0.bxc").is_file());
    assert!(train_dir.join("fold1_history.txt").is_file());

    let ckpt = train_dir.join("fold0.bxc");
    let (code, stdout, _) = run(&[
        "eval",
        "--manifest",
        &manifest,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "11",
        "--folds",
        "2",
        "--out",
        train_out,
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("accuracy"));
    assert!(train_dir.join("eval_report.txt").is_file());

    let explain_dir = tmp.path().join("explain");
    let (code, stdout, _) = run(&[
        "explain",
        "--manifest",
        &manifest,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--patients",
        "p0000,p0008",
        "--out",
        explain_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("2 patient reports"));
    let report = std::fs::read_to_string(explain_dir.join("p0000/report.txt")).unwrap();
    assert!(report.contains("alpha aggregate stain=S0"));
    assert!(report.contains("layer_importance 1"));
}

#[test]
fn csl_generate_and_train() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("csl");
    let (code, stdout, stderr) = run(&[
        "generate",
        "--task",
        "csl",
        "--patients",
        "6",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("csl"));
    // Structure-only dataset trains through the same pipeline.
    let (code, _, stderr) = run(&[
        "train",
        "--manifest",
        data.join("manifest.toml").to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
        "--seed",
        "3",
        "--layers",
        "1",
        "--hidden-dim",
        "4",
        "--pe-dim",
        "4",
        "--max-epochs",
        "2",
        "--folds",
        "2",
    ]);
    assert_eq!(code, 0, "{stderr}");
}

#[test]
fn preset_hyperparameter_flags_accepted() {
    // The documented preset: ratio 0.7, four layers, walk length 20, two
    // attention heads, dropout 0.2.
    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate(&tmp.path().join("data"));
    let (code, _, stderr) = run(&[
        "train", "--manifest", &manifest, "--out", tmp.path().join("o").to_str().unwrap(),
        "--pool-ratio", "0.7", "--layers", "4", "--pe-dim", "20", "--gat-heads", "2",
        "--mhsa-heads", "2", "--dropout", "0.2", "--hidden-dim", "8", "--knn-k", "3",
        "--max-epochs", "1", "--folds", "2", "--seed", "5",
    ]);
    assert_eq!(code, 0, "{stderr}");
}

#[test]
fn usage_and_validation_exit_one() {
    let (code, _, stderr) = run(&["generate", "--bogus-flag"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("--bogus-flag") || stderr.to_lowercase().contains("usage"));

    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate(&tmp.path().join("data"));
    let (code, _, stderr) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--pool-ratio",
        "1.5",
    ]);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("pool_ratio"));

    // Unknown patient id lists the valid ones.
    let train_dir = tmp.path().join("run");
    let (code, _, _) = run(&[
        "train",
        "--manifest",
        &manifest,
        "--out",
        train_dir.to_str().unwrap(),
        "--seed",
        "1",
        "--layers",
        "1",
        "--hidden-dim",
        "4",
        "--pe-dim",
        "0",
        "--knn-k",
        "3",
        "--max-epochs",
        "1",
        "--folds",
        "2",
    ]);
    assert_eq!(code, 0);
    let (code, _, stderr) = run(&[
        "explain",
        "--manifest",
        &manifest,
        "--checkpoint",
        train_dir.join("fold0.bxc").to_str().unwrap(),
        "--patients",
        "ghost",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("p0000"));
}

#[test]
fn io_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate(&tmp.path().join("data"));
    let (code, _, stderr) = run(&[
        "explain",
        "--manifest",
        &manifest,
        "--checkpoint",
        "/nonexistent/model.bxc",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{stderr}");

    let (code, _, _) = run(&[
        "train",
        "--manifest",
        "/nonexistent/manifest.toml",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn dataset_too_small_for_stratification_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let (code, _, _) = run(&[
        "generate",
        "--task",
        "planted",
        "--patients",
        "3",
        "--nodes-min",
        "4",
        "--nodes-max",
        "5",
        "--feature-dim",
        "3",
        "--seed",
        "2",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let (code, _, stderr) = run(&[
        "train",
        "--manifest",
        data.join("manifest.toml").to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--folds",
        "5",
    ]);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("fewer than"));
}
