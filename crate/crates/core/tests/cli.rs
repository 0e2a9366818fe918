//! Drives the `lowreg` binary in scratch directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lowreg::io::{read_ddf, read_labels, read_volume, Table};

fn lowreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowreg"))
        .current_dir(dir)
        .env("LOWREG_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lowreg(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, magnitude: &str) {
    ok(dir, &["synth", "--size", "24", "--magnitude", magnitude, "--seed", "5"]);
}

#[test]
fn synth_writes_five_readable_files() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["synth", "--size", "24", "--magnitude", "1.5", "--kind", "abdominal", "--out", "case"]);
    let out = dir.path().join("case");
    for f in ["moving.vol", "fixed.vol", "moving_labels.vol", "fixed_labels.vol", "gt_ddf.vol"] {
        assert!(out.join(f).is_file(), "{f} missing");
        assert!(stdout.contains(f), "{f} not reported");
    }
    let fixed = read_volume::<f32>(&out.join("fixed.vol")).unwrap();
    assert_eq!(fixed.dims(), lowreg::Dims::cube(24));
    let labels = read_labels(&out.join("fixed_labels.vol")).unwrap();
    assert_eq!(labels.labels_present(), vec![0, 1, 2]);
    assert_eq!(read_ddf::<f32>(&out.join("gt_ddf.vol")).unwrap().dims(), fixed.dims());
}

#[test]
fn zero_magnitude_pair_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "0");
    let out = dir.path().join("out");
    assert_eq!(fs::read(out.join("moving.vol")).unwrap(), fs::read(out.join("fixed.vol")).unwrap());
    assert_eq!(fs::read(out.join("moving_labels.vol")).unwrap(), fs::read(out.join("fixed_labels.vol")).unwrap());
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), "1.5");
    synth(b.path(), "1.5");
    for f in ["moving.vol", "fixed_labels.vol", "gt_ddf.vol"] {
        assert_eq!(fs::read(a.path().join("out").join(f)).unwrap(), fs::read(b.path().join("out").join(f)).unwrap());
    }
    ok(a.path(), &["noise", "--input", "out/fixed.vol", "--sigma", "0.1", "--seed", "3"]);
    ok(b.path(), &["noise", "--input", "out/fixed.vol", "--sigma", "0.1", "--seed", "3"]);
    let noisy = |d: &Path| fs::read(d.join("out/fixed_noisy.vol")).unwrap();
    assert_eq!(noisy(a.path()), noisy(b.path()));
}

#[test]
fn register_identical_pair_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1.5");
    let reg = [
        "register", "--moving", "out/fixed.vol", "--fixed", "out/fixed.vol", "--moving-labels", "out/fixed_labels.vol",
        "--loss", "mse", "--steps", "30", "--out", "reg",
    ];
    ok(dir.path(), &reg);
    let ddf = read_ddf::<f32>(&dir.path().join("reg/ddf.vol")).unwrap();
    assert!(ddf.max_abs() < 0.1);
    let trace = Table::read(&dir.path().join("reg/trace.csv")).unwrap();
    assert_eq!(trace.header, ["level", "step", "lr", "total", "similarity", "regularization"]);
    assert!(!trace.rows.is_empty());

    // a second run gives the same bytes
    let first = fs::read(dir.path().join("reg/ddf.vol")).unwrap();
    ok(dir.path(), &reg);
    assert_eq!(first, fs::read(dir.path().join("reg/ddf.vol")).unwrap());

    let stdout = ok(dir.path(), &["evaluate", "--warped-labels", "reg/warped_labels.vol", "--fixed-labels", "out/fixed_labels.vol"]);
    assert!(stdout.contains("dice label 1: 1.0"), "{stdout}");
    let eval = Table::read(&dir.path().join("out/evaluation.csv")).unwrap();
    assert_eq!(eval.header, ["metric", "label", "value"]);
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = lowreg(dir.path(), &["project", "--input", "nowhere/absent.vol"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.vol"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lowreg(dir.path(), &["synth", "--size", "lots"]).status.code(), Some(1));
    assert_eq!(lowreg(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(lowreg(dir.path(), &["project"]).status.code(), Some(1));
    assert_eq!(lowreg(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn full_rank_projection_reconstructs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1.5");
    ok(dir.path(), &["project", "--input", "out/fixed.vol", "--rank", "24", "--axis", "y"]);
    let orig = read_volume::<f64>(&dir.path().join("out/fixed.vol")).unwrap();
    let rec = read_volume::<f64>(&dir.path().join("out/lowrank.vol")).unwrap();
    let worst = orig.data().iter().zip(rec.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
    let spectra = Table::read(&dir.path().join("out/spectra.csv")).unwrap();
    assert_eq!(spectra.rows.len(), 24);
    assert_eq!(spectra.header.len(), 25);
    assert_eq!(lowreg(dir.path(), &["project", "--input", "out/fixed.vol", "--rank", "25"]).status.code(), Some(1));
}

#[test]
fn ablation_resumes_to_the_same_table() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["ablate", "--ranks", "4", "--sigmas", "0.05", "--pairs", "1", "--size", "24", "--magnitude", "1.5", "--steps", "20", "--levels", "1"];
    ok(dir.path(), &args);
    let summary = fs::read(dir.path().join("out/ablation.csv")).unwrap();
    let cells = fs::read(dir.path().join("out/ablation_cells.csv")).unwrap();
    let table = Table::read(&dir.path().join("out/ablation.csv")).unwrap();
    assert_eq!(table.header, ["structure", "rank", "sigma", "mean_dice", "std_dice"]);
    assert_eq!(table.rows.len(), 2);
    // every cell is already done: nothing reruns and the outputs match
    let again = lowreg(dir.path(), &args);
    assert!(again.status.success());
    assert!(!String::from_utf8_lossy(&again.stderr).contains("new"));
    assert_eq!(summary, fs::read(dir.path().join("out/ablation.csv")).unwrap());
    assert_eq!(cells, fs::read(dir.path().join("out/ablation_cells.csv")).unwrap());
}

#[test]
fn config_file_supplies_arguments() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), "seed = 5\nout = \"cfg\"\n[synth]\nsize = 20\nmagnitude = 0.0\n").unwrap();
    ok(dir.path(), &["--config", "exp.toml", "synth"]);
    let out = dir.path().join("cfg");
    assert_eq!(read_volume::<f32>(&out.join("fixed.vol")).unwrap().dims(), lowreg::Dims::cube(20));
    assert_eq!(fs::read(out.join("moving.vol")).unwrap(), fs::read(out.join("fixed.vol")).unwrap());
    fs::write(dir.path().join("bad.toml"), "[synth]\nsize = 20\nsurprise = 1\n").unwrap();
    assert_ne!(lowreg(dir.path(), &["--config", "bad.toml", "synth"]).status.code(), Some(0));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["selftest"]);
    assert!(!stdout.contains("FAIL"));
    assert!(stdout.contains("18 of 18 checks passed"), "{stdout}");
}
