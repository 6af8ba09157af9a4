use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use canguard::can_codec::SignalCatalog;
use canguard::traffic::{encode_trace, generate_trace_at, write_raw_trace};

fn canguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canguard")).args(args).output().expect("spawn canguard")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A run small enough for debug builds: 30 s of traffic, 2 Hz, tiny model.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"out_dir = "run"
{extra}
[data]
duration_s = 30.0
rate_hz = 2.0

[model]
hidden_dim = 4

[train]
epochs = 2
batch_size = 8

[attack]
fgsm_epsilons = [0.05, 0.1]
bim_epsilons = [0.05, 0.1]
bim_alpha_fractions = [0.5]
bim_iterations = 2

[defense]
batch_n = 4
max_iterations = 2
minibatch_size = 4

[[eval.optimizers]]
kind = "adam"

[[eval.optimizers]]
kind = "sgd"
"#
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_pipeline(dir: &Path) {
    let cfg = small_config(dir, "");
    let cfg = cfg.to_str().unwrap();
    for stage in ["gen", "train", "attack", "defend"] {
        let o = canguard(&[stage, "--config", cfg, "--seed", "3"]);
        assert!(o.status.success(), "{stage} failed: {}", stderr(&o));
    }
    let o = canguard(&["eval", "--config", cfg, "--seed", "3", "--compare"]);
    assert!(o.status.success(), "eval failed: {}", stderr(&o));
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    let files = [
        "data/train.bin",
        "data/test.bin",
        "data/trace_raw.csv",
        "train/model.ckpt",
        "train/history.csv",
        "train/metrics.csv",
        "attack/sweep.csv",
        "attack/best.csv",
        "attack/adversarial_test_bim.bin",
        "defend/robust.ckpt",
        "defend/retrain_history.csv",
        "defend/robustness.csv",
        "eval/metrics.csv",
        "train/manifest.json",
        "train/config.toml",
        "defend/manifest.json",
    ];
    for f in files {
        let x = fs::read(a.path().join("run").join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let y = fs::read(b.path().join("run").join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    // The comparison table carries wall-clock time; everything else must match.
    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut cols: Vec<&str> = l.split(',').collect();
                cols.remove(5);
                cols.join(",")
            })
            .collect()
    };
    let ta = strip(&a.path().join("run/eval/table.csv"));
    assert_eq!(ta, strip(&b.path().join("run/eval/table.csv")));
    assert_eq!(ta.len(), 3);
    assert!(a.path().join("run/eval/curves/sgd/loss.csv").is_file());
}

#[test]
fn different_seed_changes_data() {
    let a = tempfile::tempdir().unwrap();
    let cfg = small_config(a.path(), "");
    let cfg = cfg.to_str().unwrap();
    assert!(canguard(&["gen", "--config", cfg, "--seed", "1"]).status.success());
    let first = fs::read(a.path().join("run/data/train.bin")).unwrap();
    assert!(canguard(&["gen", "--config", cfg, "--seed", "2"]).status.success());
    assert_ne!(first, fs::read(a.path().join("run/data/train.bin")).unwrap());
}

#[test]
fn missing_dbc_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"dbc = "nope.dbc""#);
    let o = canguard(&["gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.dbc"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[data]\nrate_hz = 0.0\n[model]\nthreshold = 2.0\n").unwrap();
    let o = canguard(&["gen", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("rate_hz") && err.contains("threshold"), "{err}");
}

#[test]
fn eval_names_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    assert!(canguard(&["gen", "--config", cfg]).status.success());
    let ckpt = dir.path().join("absent.ckpt");
    let o = canguard(&["eval", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.ckpt"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(canguard(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(canguard(&["decode"]).status.code(), Some(1));
    assert_eq!(canguard(&["--help"]).status.code(), Some(0));
}

#[test]
fn decode_matches_generated_values() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = SignalCatalog::bundled();
    let series = generate_trace_at(&catalog, 12.0, 2.0, 9).unwrap();
    let raw = dir.path().join("raw.csv");
    write_raw_trace(&encode_trace(&series, &catalog).unwrap(), fs::File::create(&raw).unwrap()).unwrap();
    let out = dir.path().join("decoded.csv");
    let o = canguard(&["decode", "--trace", raw.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["timestamp", "signal_name", "value"]);
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let t: f64 = rec[0].parse().unwrap();
        let j = catalog.feature_index(&rec[1]).unwrap();
        let v: f64 = rec[2].parse().unwrap();
        let &(_, truth) = series.observations[j].iter().find(|(ts, _)| (ts - t).abs() < 1e-6).unwrap();
        let sig = catalog.signal(j);
        assert!((v - truth).abs() <= sig.scale.abs() / 2.0 + 1e-9, "{}: {v} vs {truth}", sig.name);
        rows += 1;
    }
    assert_eq!(rows, series.total_observations());
}

#[test]
fn empty_trace_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    fs::write(&raw, "timestamp,can_id_hex,b0,b1,b2,b3,b4,b5,b6,b7\n").unwrap();
    let out = dir.path().join("decoded.csv");
    let o = canguard(&["decode", "--trace", raw.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("no decodable frames"));
    assert_eq!(fs::read_to_string(&out).unwrap().trim(), "timestamp,signal_name,value");
}

#[test]
fn decode_rejects_missing_dbc() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    fs::write(&raw, "timestamp,can_id_hex,b0,b1,b2,b3,b4,b5,b6,b7\n").unwrap();
    let o = canguard(&["decode", "--dbc", "missing.dbc", "--trace", raw.to_str().unwrap(), "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.dbc"));
}

#[test]
fn unknown_nested_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    fs::write(&path, "[data.fdia]\nfraction_atacked = 0.3\n").unwrap();
    let o = canguard(&["gen", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fraction_atacked"), "{}", stderr(&o));
}
