use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_memeface")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let raw = root.path().join("raw");
    let data = root.path().join("data");
    let damsm = root.path().join("damsm");
    let ckpt = root.path().join("ckpt");
    let frames = root.path().join("frames");

    run(&["synth-corpus", "--out", p(&raw), "--n", "32", "--resolution", "32", "--seed", "2"]);
    let pipeline_cfg = root.path().join("pipeline.json");
    std::fs::write(&pipeline_cfg, r#"{"k": 4, "canonical_resolution": 16}"#).unwrap();
    let summary = run(&["curate", "--input", p(&raw), "--out", p(&data), "--config", p(&pipeline_cfg)]);
    assert!(summary.contains("clusters"), "{summary}");

    let model_cfg = root.path().join("model.json");
    std::fs::write(&model_cfg, serde_json::to_string(&memeface_core_tiny()).unwrap()).unwrap();
    run(&["pretrain-damsm", "--data", p(&data), "--out", p(&damsm), "--model", p(&model_cfg), "--epochs", "2", "--batch-size", "8"]);
    run(&[
        "train", "--data", p(&data), "--damsm", p(&damsm.join("damsm.ckpt")), "--out", p(&ckpt),
        "--epochs", "4", "--checkpoint-period", "2", "--batch-size", "8",
    ]);
    let log = std::fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let stdout = run(&[
        "generate", "--checkpoints", p(&ckpt), "--templates", p(&data), "--text", "when the code works",
        "--seed", "4", "--out", p(&frames),
    ]);
    assert!(stdout.contains("seed 4"), "{stdout}");
    let mut names: Vec<String> = std::fs::read_dir(&frames).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, vec!["epoch_000002.png", "epoch_000004.png"]);
}

fn memeface_core_tiny() -> serde_json::Value {
    serde_json::json!({
        "vocab_size": 1, "max_caption_len": 12, "embed_dim": 8, "text_dim": 8, "cond_dim": 8, "noise_dim": 8,
        "noise": "uniform", "hidden_dim": 8, "edit_dim": 8, "disc_dim": 8, "damsm_channels": 8, "region_grid": 4,
        "stages": 2, "base_resolution": 8, "share_text_encoder": true
    })
}
