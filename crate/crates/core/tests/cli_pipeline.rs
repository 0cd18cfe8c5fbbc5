use std::path::Path;
use std::process::{Command, Output};

fn pcrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcrp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = pcrp(args);
    assert!(
        out.status.success(),
        "pcrp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{"t_fixed": 10, "hidden_dim": 8, "ks": [3, 5], "r": 2, "pretrain_epochs": 2, "batch_size": 8}"#;

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"), dir.path().join("c.jsonl"));
    for (path, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok(&["synth", "--out", p(path), "--seed", seed, "--n-per-class", "4", "--frames", "10"]);
    }
    let read = |x: &Path| std::fs::read(x).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert!(dir.path().join("a.manifest.json").exists());
}

#[test]
fn full_pipeline_runs_and_probe_leaves_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    std::fs::write(d("cfg.json"), TINY).unwrap();

    ok(&["synth", "--out", p(&d("raw.jsonl")), "--n-per-class", "8", "--frames", "10"]);
    ok(&["preprocess", "--data", p(&d("raw.jsonl")), "--out", p(&d("pre.jsonl"))]);
    assert!(d("pre.manifest.json").exists());
    ok(&[
        "pretrain", "--config", p(&d("cfg.json")), "--data", p(&d("pre.jsonl")),
        "--out", p(&d("ck.bin")), "--log", p(&d("train.jsonl")), "--cluster-dir", p(&d("clusters")),
    ]);
    let log = std::fs::read_to_string(d("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(d("clusters").join("clusters_epoch1.json").exists());

    ok(&["encode", "--ckpt", p(&d("ck.bin")), "--data", p(&d("pre.jsonl")), "--out", p(&d("enc.jsonl"))]);
    let enc = std::fs::read_to_string(d("enc.jsonl")).unwrap();
    assert_eq!(enc.lines().count(), 24);
    let first: serde_json::Value = serde_json::from_str(enc.lines().next().unwrap()).unwrap();
    assert_eq!(first["encoding"].as_array().unwrap().len(), 8);

    let before = std::fs::read(d("ck.bin")).unwrap();
    ok(&[
        "probe", "--ckpt", p(&d("ck.bin")), "--data", p(&d("pre.jsonl")),
        "--out", p(&d("eval.json")), "--epochs", "20",
    ]);
    assert_eq!(std::fs::read(d("ck.bin")).unwrap(), before);
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(d("eval.json")).unwrap()).unwrap();
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(d("eval.confusion.csv").exists());

    ok(&[
        "report", "--log", p(&d("train.jsonl")), "--eval", p(&d("eval.json")),
        "--out", p(&d("report")),
    ]);
    for f in ["loss.csv", "confusion.csv", "per_class.csv"] {
        assert!(d("report").join(f).exists(), "missing {f}");
    }
    let loss = std::fs::read_to_string(d("report").join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
}

#[test]
fn help_is_available_for_every_subcommand() {
    for sub in ["synth", "preprocess", "pretrain", "encode", "probe", "report"] {
        let out = ok(&[sub, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(pcrp(&["pretrain", "--bogus"]).status.code(), Some(2));
    assert_eq!(pcrp(&[]).status.code(), Some(2));
    let out = pcrp(&["preprocess", "--data", "/nonexistent/x.jsonl", "--out", "/tmp/unused.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
