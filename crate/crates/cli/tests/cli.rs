//! End-to-end runs of the `covseg` binary on a tiny corpus.

use std::path::Path;
use std::process::{Command, Output};

fn covseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config for a 2-video, 32×32 corpus and a two-step training run under `root`.
fn write_config(root: &Path) -> String {
    let cfg = serde_json::json!({
        "corpus": {
            "train_videos": 1,
            "test_videos": 1,
            "static_images": 2,
            "scene": { "frame_size": [32, 32], "length": 4, "distractors": 1, "size": [5.0, 8.0] },
            "seed": 3
        },
        "model": { "channels": 4, "embed_widths": [3, 4], "head_width": 4 },
        "train": { "batch_size": 2, "max_steps": 2 },
        "infer": { "n_refs": 2 },
        "paths": {
            "corpus": root.join("corpus"),
            "run": root.join("run")
        }
    });
    let path = root.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn self_evaluation_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let gen = covseg(&["generate", "--config", &cfg]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("scores");
    let eval = covseg(&[
        "eval",
        "--config",
        &cfg,
        "--pred",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("scores.json")).unwrap()).unwrap();
    let seqs = report["sequences"].as_array().unwrap();
    assert_eq!(seqs.len(), 1);
    for s in seqs {
        assert_eq!(s["mean_j"], 1.0);
    }
    assert_eq!(report["aggregate"]["mean_j"], 1.0);
    assert!(out.join("scores.csv").exists());
}

#[test]
fn generate_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for (cmd, extra) in [
        ("generate", vec![]),
        ("train", vec![]),
        ("infer", vec!["--variant", "vanilla", "--fusion", "prediction"]),
        ("eval", vec![]),
    ] {
        let mut args = vec![cmd, "--config", &cfg];
        args.extend(extra);
        let o = covseg(&args);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let run = dir.path().join("run");
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "step,phase,loss,ortho_penalty");
    assert_eq!(loss.lines().count(), 3);
    assert!(run.join("config.json").exists());
    assert!(run.join("checkpoint/checkpoint.json").exists());
    let pred = run.join("predictions");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pred.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["checkpoint_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["inference"]["n_refs"], 2);
    assert!(pred.join("test_000/masks/00003.pgm").exists());
    assert!(pred.join("scores.json").exists());
    // The echoed architecture is the checkpoint's, whatever --variant says.
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pred.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["model"]["variant"], "symmetric");
    assert_eq!(echoed["infer"]["fusion"], "prediction");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    let o = covseg(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    let o = covseg(&["infer", "--variant", "diagonal"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("diagonal"));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = covseg(&["eval", "--corpus", missing.to_str().unwrap(), "--pred", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn gradcheck_passes_on_fresh_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = covseg(&["gradcheck", "--seeds", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("softmax_columns"));
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("gradcheck.json").exists());
}
