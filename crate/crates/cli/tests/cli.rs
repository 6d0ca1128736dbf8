use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn sentinel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sentinel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sentinel(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Spec with dense markers so tiny runs have something to learn.
fn dataset(root: &Path, name: &str, seed: &str) -> PathBuf {
    let spec = root.join(format!("{name}.json"));
    ok(&["init-config", "--out", p(&spec), "--mean-gap", "20", "--local-signal", "0.5"]);
    let data = root.join(name);
    ok(&["gen", "--config", p(&spec), "--out", p(&data), "--seed", seed, "--files-per-class", "2", "--duration", "0.2"]);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", p(data), "--out", p(out), "--context", "32", "--d-model", "8", "--heads", "2",
        "--layers", "1", "--batch-size", "8", "--no-timing",
    ];
    if !extra.contains(&"--epochs") {
        args.extend(["--epochs", "1"]);
    }
    args.extend_from_slice(extra);
    sentinel(&args)
}

#[test]
fn gen_requires_config() {
    let dir = TempDir::new().unwrap();
    let out = sentinel(&["gen", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
    assert!(!dir.path().join("d").exists());

    let missing = sentinel(&["gen", "--config", p(&dir.path().join("nope.json")), "--out", p(&dir.path().join("d"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn gen_is_seeded() {
    let dir = TempDir::new().unwrap();
    let a = dataset(dir.path(), "a", "7");
    let b = dataset(dir.path(), "b", "7");
    let c = dataset(dir.path(), "c", "8");
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.tsv")).unwrap());
    assert_eq!(manifest, fs::read_to_string(c.join("manifest.tsv")).unwrap());
    for line in manifest.lines() {
        let rel = line.split('\t').next().unwrap();
        let bytes = fs::read(a.join(rel)).unwrap();
        assert_eq!(bytes, fs::read(b.join(rel)).unwrap(), "{rel}");
        assert_ne!(bytes, fs::read(c.join(rel)).unwrap(), "{rel}");
    }
    let run: Value = serde_json::from_str(&fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(run["subcommand"], "gen");
    assert_eq!(run["seeds"]["spec"], 7);
}

#[test]
fn train_eval_infer_pipeline() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), "data", "1");
    let model = dir.path().join("model");
    let out = train(&data, &model, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ckpt", "vocab.tsv", "train_report.json", "run_manifest.json"] {
        assert!(model.join(f).is_file(), "{f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(model.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(report["epochs"][0]["seconds"], 0.0);

    let ev = dir.path().join("eval");
    ok(&["eval", "--model", p(&model), "--data", p(&data), "--out", p(&ev)]);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(ev.join("eval_report.json")).unwrap()).unwrap();
    for key in ["accuracy", "precision", "recall", "f1_score", "kappa", "mcc"] {
        assert!(metrics[key].is_number(), "{key}");
    }
    let table = fs::read_to_string(ev.join("confusion.txt")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(table.contains("RansomwarePoC"));

    let trace = data.join("Bdvl").join("trace_00000.log");
    let stream = ok(&["infer", "--model", p(&model), "--trace", p(&trace), "--threshold", "0", "--span", "3"]);
    let verdicts: Vec<Value> = String::from_utf8(stream.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!verdicts.is_empty());
    let mut next = 0;
    for v in &verdicts {
        assert_eq!(v["verdict"]["malicious"], true);
        let range = v["verdict"]["window_range"].as_array().unwrap();
        assert_eq!(range[0].as_u64().unwrap(), next);
        let end = range[1].as_u64().unwrap();
        assert!(end > next && end - next <= 3);
        next = end;
    }

    let jsonl = dir.path().join("verdicts.jsonl");
    let vote = ok(&["aggregate", "--model", p(&model), "--trace", p(&trace), "--agg", "vote", "--span", "3", "--out", p(&jsonl)]);
    assert_eq!(fs::read(&jsonl).unwrap(), vote.stdout);
    assert!(dir.path().join("verdicts.jsonl.run_manifest.json").is_file());
    for line in String::from_utf8(vote.stdout).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let probs: Vec<f64> = v["verdict"]["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(probs.iter().filter(|&&x| x == 1.0).count(), 1, "vote pools to a one-hot vector");
    }

    let bad_weights = sentinel(&["infer", "--model", p(&model), "--trace", p(&trace), "--agg", "weighted:1,1", "--span", "3"]);
    assert_eq!(bad_weights.status.code(), Some(2));
}

#[test]
fn vocabulary_mismatch_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), "data", "1");
    let model = dir.path().join("model");
    assert!(train(&data, &model, &[]).status.success());
    let other = dir.path().join("other.tsv");
    fs::write(&other, "[PAD]\t0\n[UNK]\t1\n[CLS]\t2\nread\t3\n").unwrap();
    let ev = dir.path().join("eval");
    let out = sentinel(&["eval", "--model", p(&model), "--vocab", p(&other), "--data", p(&data), "--out", p(&ev)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
    assert!(!ev.exists());
}

#[test]
fn rejected_configs_exit_2_without_outputs() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), "data", "1");
    let model = dir.path().join("model");
    for extra in [&["--epochs", "0"][..], &["--dropout", "1.5"], &["--val-fraction", "1"], &["--pattern", "sliding:w=4,g=0"], &["--pattern", "bogus"]] {
        let out = train(&data, &model, extra);
        assert_eq!(out.status.code(), Some(2), "{extra:?}");
        assert!(!String::from_utf8_lossy(&out.stderr).contains("multiple times"));
        assert!(!model.exists());
    }
}

#[test]
fn failed_training_leaves_no_partial_outputs() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), "data", "1");
    fs::create_dir(data.join("Trojan")).unwrap();
    let model = dir.path().join("nested").join("model");
    let out = train(&data, &model, &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.path().join("nested").exists());
}

#[test]
fn divergence_is_a_numerical_fault() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), "data", "1");
    let model = dir.path().join("model");
    let out = train(&data, &model, &["--lr", "1e30", "--epochs", "3"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!model.exists());
}

#[test]
fn replay_reproduces_a_training_run() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), "data", "3");
    let model = dir.path().join("model");
    assert!(train(&data, &model, &[]).status.success());
    let ckpt = fs::read(model.join("model.ckpt")).unwrap();
    let report = fs::read(model.join("train_report.json")).unwrap();
    let manifest = dir.path().join("train_manifest.json");
    fs::rename(model.join("run_manifest.json"), &manifest).unwrap();
    fs::remove_dir_all(&model).unwrap();

    ok(&["replay", p(&manifest)]);
    assert_eq!(fs::read(model.join("model.ckpt")).unwrap(), ckpt);
    assert_eq!(fs::read(model.join("train_report.json")).unwrap(), report);
}
