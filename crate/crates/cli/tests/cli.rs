use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use udsaudit::corpus::CorpusCounts;
use udsaudit::tinylm::{ModelConfig, TrainConfig};
use udsaudit::unlearners::{Method, PoolConfig, UnlearnConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_uds-audit"));
    c.env("RUST_LOG", "info");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "{args:?} failed:\n{err}");
    err
}

/// A small configuration so the whole chain runs in seconds.
fn small_config(dir: &Path) -> PathBuf {
    let model = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 20,
        grad_accum: 1,
        ..TrainConfig::default()
    };
    let mut grid = vec![
        UnlearnConfig::new(Method::GradDiff, 1e-3, 2, 1.0, 0),
        UnlearnConfig::new(Method::IdkNll, 1e-3, 2, 1.0, 0),
        UnlearnConfig {
            beta: Some(0.5),
            ..UnlearnConfig::new(Method::Npo, 1e-3, 2, 1.0, 0)
        },
    ];
    grid.push(UnlearnConfig {
        rmu_layer: Some(1),
        rmu_scale: Some(8.0),
        ..UnlearnConfig::new(Method::Rmu, 3e-3, 2, 1.0, 0)
    });
    let pool = PoolConfig {
        grid,
        n_positive: 2,
        n_negative: 2,
        pool_train: TrainConfig {
            epochs: 4,
            ..train.clone()
        },
    };
    let counts = CorpusCounts {
        n_retain: 20,
        n_forget: 10,
        n_holdout_nonmember: 10,
        n_holdout_real: 5,
        n_holdout_world: 5,
    };
    let cfg = serde_json::json!({
        "seed": 0,
        "model": model,
        "counts": counts,
        "train": train,
        "pool": pool,
        "tau": 0.05,
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn error_record(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("error record");
    serde_json::from_str(line).unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let common = ["--config", c, "--out", o];
    let with = |cmd: &str, extra: &[&str]| -> Vec<String> {
        let mut v = vec![cmd.to_string()];
        v.extend(common.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let call = |v: Vec<String>| ok(&v.iter().map(String::as_str).collect::<Vec<_>>());

    call(with("gen", &[]));
    call(with("train", &[]));
    call(with("unlearn", &[]));
    let first = call(with("baseline", &[]));
    assert!(!first.contains("cache hit"));
    let cache_bytes = std::fs::read(out.join("stage1_cache.json")).unwrap();
    let second = call(with("baseline", &[]));
    assert!(second.contains("cache hit"), "{second}");
    assert_eq!(std::fs::read(out.join("stage1_cache.json")).unwrap(), cache_bytes);

    // identity anchor through the CLI
    let full = out.join("checkpoints/full.ckpt");
    call(with("uds", &["--unlearned", full.to_str().unwrap()]));
    let rep = read_json(&out.join("uds/full.json"));
    assert!(rep["report"]["model_uds"].as_f64().unwrap() <= 1e-6);
    assert_eq!(rep["format_version"], 1);
    assert!(rep["inputs"]["corpus"].is_string());
    assert!(rep["config_digest"].is_string());

    let pool = out.join("checkpoints/pool");
    call(with("uds", &["--unlearned", pool.to_str().unwrap()]));
    call(with("uds", &["--unlearned", full.to_str().unwrap(), "--target", "original"]));
    let orig = read_json(&out.join("uds/full.original.json"));
    assert!(orig["report"]["mean_drop"].as_f64().unwrap().abs() <= 1e-6);

    let retain = out.join("checkpoints/retain.ckpt");
    call(with("metrics", &["--unlearned", retain.to_str().unwrap()]));
    assert!(out.join("metrics/retain.csv").exists());
    call(with("whitebox", &["--unlearned", retain.to_str().unwrap()]));
    let wb = read_json(&out.join("whitebox/retain.json"));
    assert!((wb["report"]["cka"]["aggregate"].as_f64().unwrap() - 1.0).abs() <= 1e-6);

    call(with("metaeval", &[]));
    call(with("rank", &[]));
    let ranking = std::fs::read_to_string(out.join("ranking.csv")).unwrap();
    let header = ranking.lines().next().unwrap();
    assert!(header.contains("privacy_without") && header.contains("privacy_with"), "{header}");
    assert_eq!(ranking.lines().count(), 1 + 4);

    // reruns reproduce the report bytes
    let before = std::fs::read(out.join("ranking.json")).unwrap();
    call(with("rank", &[]));
    assert_eq!(std::fs::read(out.join("ranking.json")).unwrap(), before);

    call(with("sweep-tau", &[]));
    let sweep = std::fs::read_to_string(out.join("tau_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 8);

    // a different full model no longer matches the cache
    let bad = run(&with("uds", &["--full", retain.to_str().unwrap(), "--unlearned", full.to_str().unwrap()])
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>());
    assert!(!bad.status.success());
    assert_eq!(error_record(&bad)["error"], "StaleCacheError");
}

#[test]
fn missing_cache_is_named() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().to_str().unwrap();
    let out = run(&["uds", "--out", o, "--unlearned", o]);
    assert!(!out.status.success());
    let rec = error_record(&out);
    assert_eq!(rec["error"], "MissingArtifact");
    assert!(rec["path"].as_str().unwrap().ends_with("corpus.jsonl"), "{rec}");
}

#[test]
fn missing_checkpoint_is_named() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().to_str().unwrap();
    ok(&["gen", "--out", o]);
    let out = run(&["train", "--out", o, "--corpus", tmp.path().join("nope.jsonl").to_str().unwrap()]);
    assert_eq!(error_record(&out)["error"], "MissingArtifact");
    let out = run(&["baseline", "--out", o]);
    let rec = error_record(&out);
    assert_eq!(rec["error"], "MissingArtifact");
    assert!(rec["path"].as_str().unwrap().ends_with("full.ckpt"), "{rec}");
}

#[test]
fn unknown_flag_is_an_error() {
    let out = run(&["gen", "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("c.json");
    std::fs::write(&p, r#"{"tau": 0.05, "tua": 1}"#).unwrap();
    let out = run(&["gen", "--config", p.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let rec = error_record(&out);
    assert!(rec["message"].as_str().unwrap().contains("tua"), "{rec}");
}

#[test]
fn help_lists_every_flag() {
    let expect: &[(&str, &[&str])] = &[
        ("gen", &["--config", "--out", "--seed", "--threads", "--corpus"]),
        ("train", &["--corpus"]),
        ("unlearn", &["--full", "--retain"]),
        ("baseline", &["--full", "--retain", "--cache", "--tau", "--location"]),
        ("uds", &["--full", "--cache", "--unlearned", "--target", "--location"]),
        ("metrics", &["--unlearned"]),
        ("whitebox", &["--unlearned", "--tau", "--location"]),
        ("metaeval", &["--cache", "--bits"]),
        ("rank", &["--out"]),
        ("sweep-tau", &["--cache"]),
    ];
    for (cmd, flags) in expect {
        let out = run(&[cmd, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn gen_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let o = tmp.path().to_str().unwrap();
    ok(&["gen", "--out", o, "--seed", "4"]);
    let a = std::fs::read(tmp.path().join("corpus.jsonl")).unwrap();
    ok(&["gen", "--out", o, "--seed", "4"]);
    assert_eq!(std::fs::read(tmp.path().join("corpus.jsonl")).unwrap(), a);
}
