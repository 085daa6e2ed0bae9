//! End-to-end checks of the `pfn` binary: exit codes, run directories and
//! replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pfn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfn"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn pfn")
}

fn run_dir(o: &Output) -> PathBuf {
    assert!(o.status.success(), "pfn failed: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

const TINY: &[&str] = &[
    "train",
    "--prior",
    "1d",
    "--epochs",
    "1",
    "--steps-per-epoch",
    "3",
    "--batch-size",
    "2",
    "--set",
    "width=8",
    "--set",
    "ffn_dim=8",
    "--set",
    "heads=2",
    "--set",
    "val_datasets=2",
    "--set",
    "bucket_samples=2000",
    "--seed",
    "5",
];

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(pfn(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(pfn(tmp.path(), &["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(pfn(tmp.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let o = pfn(tmp.path(), &["evaluate", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = pfn(tmp.path(), &["train", "--prior", "13d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("13d"));
}

#[test]
fn train_then_evaluate_writes_one_metrics_row() {
    let tmp = tempfile::tempdir().unwrap();
    let train = run_dir(&pfn(tmp.path(), TINY));
    for f in ["manifest.txt", "config.txt", "train_log.csv", "timing.csv", "model.ckpt"] {
        assert!(train.join(f).exists(), "{f}");
    }
    let ckpt = train.join("model.ckpt");
    let eval = run_dir(&pfn(
        tmp.path(),
        &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--datasets", "3", "--context", "20", "--n-test", "5"],
    ));
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[0].starts_with("model,"));
    let manifest = fs::read_to_string(eval.join("manifest.txt")).unwrap();
    assert!(manifest.contains("subcommand = evaluate"));
    assert!(manifest.contains("model.ckpt"));
}

#[test]
fn replayed_evaluation_is_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let train = run_dir(&pfn(tmp.path(), TINY));
    let ckpt = train.join("model.ckpt");
    let eval = run_dir(&pfn(
        tmp.path(),
        &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--datasets", "2", "--context", "10", "--sweep", "5,10"],
    ));
    let manifest = eval.join("manifest.txt");
    let again = run_dir(&pfn(tmp.path(), &["replay", "--manifest", manifest.to_str().unwrap()]));
    assert_ne!(eval, again);
    for f in ["metrics.csv", "coverage.csv", "context_sweep.csv"] {
        assert_eq!(fs::read(eval.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn replay_rejects_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let train = run_dir(&pfn(tmp.path(), TINY));
    let ckpt = tmp.path().join("copy.ckpt");
    fs::copy(train.join("model.ckpt"), &ckpt).unwrap();
    let eval = run_dir(&pfn(tmp.path(), &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--datasets", "1"]));
    fs::write(&ckpt, b"tampered").unwrap();
    let o = pfn(tmp.path(), &["replay", "--manifest", eval.join("manifest.txt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generators_write_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let d = run_dir(&pfn(tmp.path(), &["gen-prior", "--prior", "2d", "--count", "2", "--points", "7"]));
    let csv = fs::read_to_string(d.join("dataset_0001.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    let d = run_dir(&pfn(tmp.path(), &["gen-powerflow", "--count", "1", "--points", "10"]));
    assert!(d.join("network.csv").exists());
    assert!(fs::read_dir(&d).unwrap().count() >= 3);
}

#[test]
fn gp_baseline_and_diagnostics_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = run_dir(&pfn(tmp.path(), &["gp-baseline", "--datasets", "2", "--context", "20"]));
    assert!(d.join("metrics.csv").exists());
    let train = run_dir(&pfn(tmp.path(), TINY));
    let ckpt = train.join("model.ckpt");
    let d = run_dir(&pfn(
        tmp.path(),
        &["diagnose-locality", "--checkpoint", ckpt.to_str().unwrap(), "--datasets", "2", "--sizes", "5,10"],
    ));
    for f in ["locality_profile.csv", "locality_summary.csv", "far_mass.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
}
