use std::path::Path;
use std::process::{Command, Output};

fn rul(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rul"))
        .args(args)
        .current_dir(dir)
        .env("RUL_LOG", "quiet")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_data(dir: &Path) {
    std::fs::write(
        dir.join("spec.json"),
        r#"{"counts": {"train": 40, "valid": 10, "test": 12}, "seed": 5}"#,
    )
    .unwrap();
    let o = rul(dir, &["gen-data", "--spec", "spec.json", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn tiny_sft(dir: &Path) {
    std::fs::write(dir.join("sft.json"), r#"{"epochs": 1, "d": 8, "d_a": 4, "d_h": 8}"#).unwrap();
    let o = rul(dir, &["train-sft", "--data", "data", "--config", "sft.json", "--out", "sft.ckpt.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_splits_vocab_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path());
    let data = t.path().join("data");
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.json", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let train = std::fs::read_to_string(data.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 40);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "gen-data");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["outputs"].as_object().unwrap().len(), 4);
}

#[test]
fn seed_flag_overrides_spec() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path());
    let o = rul(t.path(), &["gen-data", "--spec", "spec.json", "--out", "other", "--seed", "6"]);
    assert!(o.status.success());
    let a = std::fs::read(t.path().join("data/train.jsonl")).unwrap();
    let b = std::fs::read(t.path().join("other/train.jsonl")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn bad_mix_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(
        t.path().join("spec.json"),
        r#"{"mix": {"ANSWERABLE": 0.8, "MISSING": 0.3, "CONTRADICTORY": 0.2, "AMBIGUOUS": 0.1}}"#,
    )
    .unwrap();
    let o = rul(t.path(), &["gen-data", "--spec", "spec.json", "--out", "data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mix"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path());
    std::fs::write(t.path().join("sft.json"), r#"{"epochz": 3}"#).unwrap();
    let o = rul(t.path(), &["train-sft", "--data", "data", "--config", "sft.json", "--out", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_with_usage() {
    let t = tempfile::tempdir().unwrap();
    let o = rul(t.path(), &["train-sft", "--data", "nowhere", "--out", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
    tiny_data(t.path());
    let o = rul(t.path(), &["train-rl", "--data", "data", "--out", "rl.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--sft-ckpt"), "{}", stderr(&o));
}

#[test]
fn log_level_is_validated() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rul"))
        .args(["gradcheck", "--loss", "bce"])
        .current_dir(t.path())
        .env("RUL_LOG", "loud")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("RUL_LOG"));
}

#[test]
fn gradcheck_prints_one_line_per_loss() {
    let t = tempfile::tempdir().unwrap();
    let o = rul(t.path(), &["gradcheck", "--loss", "rm", "--seed", "1"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("PASS rm"), "{out}");
    let o = rul(t.path(), &["gradcheck", "--loss", "mse"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sft_then_eval_reports_every_metric() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path());
    tiny_sft(t.path());
    for f in ["sft.ckpt.json", "sft.ckpt.report.json", "sft.ckpt.manifest.json"] {
        assert!(t.path().join(f).is_file(), "{f}");
    }
    let o = rul(
        t.path(),
        &["eval", "--data", "data", "--ckpt", "sft.ckpt.json", "--aggregation", "mean", "--out", "eval.json", "--timing", "3"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("eval.json")).unwrap()).unwrap();
    for key in [
        "sentence_acc",
        "paragraph_acc",
        "ranking_acc",
        "f1_answerable",
        "refusal_rate",
        "informativeness_avg",
        "per_type_ranking_acc",
        "avg_inference_ms",
        "inference_ms_std",
        "counts",
    ] {
        assert!(r.get(key).is_some(), "{key}");
    }
    assert_eq!(r["counts"]["examples"], 12);
    assert!(r["avg_inference_ms"].as_f64().unwrap() > 0.0);

    let o = rul(t.path(), &["eval", "--data", "data", "--ckpt", "sft.ckpt.json", "--out", "e.json", "--tau", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = rul(t.path(), &["eval", "--data", "data", "--ckpt", "sft.ckpt.json", "--out", "e.json", "--timing", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn checkpoint_vocabulary_mismatch_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path());
    tiny_sft(t.path());
    std::fs::write(
        t.path().join("spec2.json"),
        r#"{"counts": {"train": 40, "valid": 10, "test": 12}, "entities": 20, "seed": 9}"#,
    )
    .unwrap();
    assert!(rul(t.path(), &["gen-data", "--spec", "spec2.json", "--out", "data2"]).status.success());
    let o = rul(t.path(), &["eval", "--data", "data2", "--ckpt", "sft.ckpt.json", "--out", "e.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn rl_drift_exits_with_training_error() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path());
    tiny_sft(t.path());
    std::fs::write(t.path().join("rl.json"), r#"{"iterations": 8, "batch_size": 4, "kl_bound": 1e-12, "learning_rate": 1.0, "max_grad_norm": null}"#).unwrap();
    let o = rul(
        t.path(),
        &["train-rl", "--data", "data", "--config", "rl.json", "--out", "rl.ckpt.json", "--sft-ckpt", "sft.ckpt.json", "--rm-ckpt", "sft.ckpt.json"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("drift"), "{}", stderr(&o));
    assert!(!t.path().join("rl.ckpt.json").exists());
}
