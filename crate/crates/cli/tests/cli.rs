use std::path::Path;
use std::process::Command;

fn forgetbench() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_forgetbench"));
    c.env("FORGETBENCH_THREADS", "1");
    c
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "seed": 1,
        "corpus": {"per_cell": 2, "heldout": 4, "forget_fraction": 0.25},
        "model": {"embed_dim": 16, "num_layers": 1},
        "training": {"epochs": 3},
        "mrd": {"k": 8, "probes": 4},
        "unlearn": {"max_steps": 8}
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn snapshot(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap()
}

#[test]
fn flags_override_the_file_and_outputs_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("train");
    let status = forgetbench()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "7", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    // The memorization check fails on this tiny model but only gates compare
    // and sensitivity.
    assert_eq!(status.code(), Some(0));
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"passed\": false"));
    let snap = snapshot(&out);
    assert_eq!(snap["seed"], 7);
    assert_eq!(snap["training"]["seed"], 7);
    assert_eq!(snap["model"]["embed_dim"], 16);
    assert_eq!(snap["training"]["epochs"], 3);
    for f in ["environment.json", "model.ckpt", "corpus.jsonl", "rejections.json", "training_curve.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let u = tmp.path().join("unlearn");
    let status = forgetbench()
        .args(["unlearn", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out.join("model.ckpt"))
        .arg("--corpus")
        .arg(out.join("corpus.jsonl"))
        .args(["--method", "cga", "--weighting", "inverse", "--out"])
        .arg(&u)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let snap = snapshot(&u);
    assert_eq!(snap["unlearn"]["method"], "cga");
    assert_eq!(snap["unlearn"]["weighting"], "inverse_mrd_proportional");
    let log = std::fs::read_to_string(u.join("run_log.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"method\":\"cga\""));
}

#[test]
fn invalid_configuration_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"unlearn": {"learning_rate": -1}}"#).unwrap();
    let status = forgetbench().args(["evaluate", "--config"]).arg(&bad).arg("--out").arg(tmp.path().join("o")).status().unwrap();
    assert_eq!(status.code(), Some(2));

    std::fs::write(&bad, "{not json").unwrap();
    let status = forgetbench().args(["evaluate", "--config"]).arg(&bad).arg("--out").arg(tmp.path().join("o")).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let status = forgetbench()
        .args(["mrd", "--checkpoint", "/no/such/file.ckpt", "--out"])
        .arg(tmp.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn bad_worker_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let status = forgetbench()
        .env("FORGETBENCH_THREADS", "zero")
        .args(["evaluate", "--out"])
        .arg(tmp.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = forgetbench().args(["unlearn", "--method", "magic"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

