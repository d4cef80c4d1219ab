//! End-to-end checks of the command-line pipeline at smoke scale.

use std::fs;
use std::path::Path;
use std::process::Command;

use stable_cde::cli::{cmd_analyze, cmd_generate, cmd_rl, cmd_train, read_manifest, ExperimentConfig, ExperimentError};
use stable_cde::stabilize::StabilizerMethod;

const BIN: &str = env!("CARGO_BIN_EXE_stable-cde");

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn smoke(out: &Path) -> ExperimentConfig {
    ExperimentConfig { out_dir: out.to_path_buf(), ..ExperimentConfig::smoke() }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_is_deterministic_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let (code, err) = run(&["generate", "--n", "100", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    for split in ["train", "val", "test"] {
        let f = format!("cohort/{split}.csv");
        assert_eq!(read(&a.join(&f)), read(&b.join(&f)), "{f} differs");
    }
    let summary: serde_json::Value = serde_json::from_slice(&read(&a.join("cohort/summary.json"))).unwrap();
    assert_eq!(summary["split_sizes"], serde_json::json!([70, 15, 15]));

    let (code, err) = run(&["generate", "--n", "100", "--out", a.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("--force"));
    let (code, _) = run(&["generate", "--n", "100", "--out", a.to_str().unwrap(), "--force"]);
    assert_eq!(code, 0);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[cohort.ratios]\ntrain = 0.8\nval = 0.15\ntest = 0.15\n").unwrap();
    let out = dir.path().join("run");
    let (code, err) = run(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(!out.exists(), "config errors must stop before any I/O");

    fs::write(&cfg, "[rl.dbcq]\ngamma = 1.5\n").unwrap();
    assert_eq!(run(&["rl", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).0, 2);
    assert_eq!(run(&["train", "--stabilizer", "bogus"]).0, 2);
    // no cohort yet
    assert_eq!(run(&["train", "--smoke", "--out", out.to_str().unwrap()]).0, 3);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn smoke_run_produces_every_documented_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, err) = run(&["all", "--smoke", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let analysis = out.join("analysis");
    let mut expected = vec!["loss_correlation.csv".to_string(), "flatness.csv".to_string()];
    for s in ["sofa", "sapsii", "oasis"] {
        expected.push(format!("pca_scatter_{s}.csv"));
        expected.push(format!("pca_scatter_{s}.svg"));
    }
    for f in ["mortality_overlay", "corr_histogram"] {
        expected.push(format!("{f}.csv"));
        expected.push(format!("{f}.svg"));
    }
    for f in &expected {
        assert!(analysis.join(f).is_file(), "missing {f}");
    }

    // the manifest hashes match the files on disk
    let m = read_manifest(&out).unwrap();
    for cmd in ["generate", "train", "rl", "analyze"] {
        let entry = &m.commands[cmd];
        assert!(!entry.outputs.is_empty(), "{cmd}");
        for (rel, hash) in &entry.outputs {
            assert_eq!(&stable_cde::cli::file_sha256(&out.join(rel)).unwrap(), hash, "{rel}");
        }
    }
    // the config echo reproduces the run configuration
    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    let back = ExperimentConfig::from_toml_over(&ExperimentConfig::default(), &echo).unwrap();
    assert_eq!(back, smoke(&out));

    // analyze again: identical bytes
    let before: Vec<Vec<u8>> = expected.iter().map(|f| read(&analysis.join(f))).collect();
    let (code, err) = run(&["analyze", "--smoke", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    for (f, b) in expected.iter().zip(before) {
        assert_eq!(read(&analysis.join(f)), b, "{f} changed on rerun");
    }

    // all refuses a populated directory
    assert_eq!(run(&["all", "--smoke", "--out", out.to_str().unwrap()]).0, 2);
}

#[test]
fn analysis_tolerates_missing_policies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    cmd_generate(&cfg, false).unwrap();
    let trained = cmd_train(&cfg, false).unwrap();
    assert!(trained[0].checkpoints.is_some());
    let summary = cmd_analyze(&cfg).unwrap();
    assert!(summary.skipped.iter().any(|s| s.contains("no WIS")), "{:?}", summary.skipped);
    let text = fs::read_to_string(dir.path().join("analysis/flatness.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.ends_with(','), "WIS cell should be empty: {row}");
}

#[test]
fn lambda_zero_still_logs_the_correlation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.train.lambda = 0.0;
    cfg.train.epochs = 4;
    cmd_generate(&cfg, false).unwrap();
    cmd_train(&cfg, false).unwrap();
    let rec: stable_cde::earlystop::TrainRecord =
        serde_json::from_slice(&read(&dir.path().join("seed_25/train_record.json"))).unwrap();
    assert_eq!(rec.lambda, Some(0.0));
    for e in &rec.epochs {
        assert!(e.corr < 0.0, "corr loss not logged at epoch {}", e.epoch);
        assert_eq!(e.total, e.mse);
    }
}

#[test]
fn grad_clip_bounds_every_recorded_norm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.set_stabilizer(StabilizerMethod::GradClip);
    cfg.train.stabilizer.clip_norm = 1.0;
    cmd_generate(&cfg, false).unwrap();
    let summary = cmd_train(&cfg, false).unwrap();
    assert!(summary[0].max_grad_norm <= 1.0 + 1e-9, "{}", summary[0].max_grad_norm);
}

#[test]
fn rl_rejects_a_checkpoint_of_another_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    cmd_generate(&cfg, false).unwrap();
    cmd_train(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.model.hidden_size = 12;
    match cmd_rl(&other, false) {
        Err(ExperimentError::Data(m)) => assert!(m.contains("hidden size"), "{m}"),
        r => panic!("expected a load error, got {r:?}"),
    }
}
