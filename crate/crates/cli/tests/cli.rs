use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rh"))
        .args(args)
        .env("RH_THREADS", "1")
        .output()
        .expect("spawn rh")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> String {
    assert_eq!(
        code(&out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// 3 categories x 10 videos, small enough for a few-second pipeline.
fn small_dataset(dir: &Path, seed: u64) -> std::path::PathBuf {
    let cfg = dir.join("synth.json");
    fs::write(
        &cfg,
        json!({"n_categories": 3, "videos_per_category": 10, "clips_per_video": [10, 16], "d_v": 8, "d_a": 8})
            .to_string(),
    )
    .unwrap();
    let root = dir.join(format!("ds{seed}"));
    ok(rh(&["synth", "--config", s(&cfg), "--out", s(&root), "--seed", &seed.to_string()]));
    root
}

fn run_config(dir: &Path, dataset: &Path, out: &Path, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("run{seed}.json"));
    fs::write(
        &path,
        json!({
            "dataset": dataset,
            "out": out,
            "seed": seed,
            "cluster": {"k_range": [2, 6]},
            "train": {"d_model": 16, "epochs": 4},
        })
        .to_string(),
    )
    .unwrap();
    path
}

#[test]
fn missing_manifest_exits_with_validate_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&rh(&["validate", "--dataset", s(dir.path())])), 10);
    let out = dir.path().join("out");
    assert_eq!(
        code(&rh(&["pipeline", "--dataset", s(dir.path()), "--out", s(&out)])),
        10
    );
}

#[test]
fn synth_output_validates() {
    let dir = tempfile::tempdir().unwrap();
    let root = small_dataset(dir.path(), 1);
    let stdout = ok(rh(&["validate", "--dataset", s(&root)]));
    assert!(stdout.starts_with("ok: 30 videos"), "{stdout}");
}

#[test]
fn corrupt_feature_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = small_dataset(dir.path(), 1);
    let manifest = read(&root.join("manifest.json"));
    let rel = manifest["videos"][0]["visual_file"].as_str().unwrap();
    fs::write(root.join(rel), b"AVHX").unwrap();
    let out = rh(&["validate", "--dataset", s(&root)]);
    assert_eq!(code(&out), 10);
    assert!(String::from_utf8_lossy(&out.stderr).contains("header"));
}

#[test]
fn k_range_beyond_video_count_exits_with_cluster_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = small_dataset(dir.path(), 1);
    let out = rh(&[
        "cluster", "--dataset", s(&root), "--out", s(&dir.path().join("c")), "--k-min", "2", "--k-max", "40",
    ]);
    assert_eq!(code(&out), 20);
}

#[test]
fn staged_commands_reproduce_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let root = small_dataset(d, 2);
    let seed = "3";

    let cfg = run_config(d, &root, &d.join("pipe"), 3);
    ok(rh(&["pipeline", "--config", s(&cfg)]));

    let cats = d.join("cats");
    ok(rh(&["cluster", "--dataset", s(&root), "--out", s(&cats), "--k-min", "2", "--k-max", "6", "--seed", seed]));
    let ph = d.join("ph.json");
    ok(rh(&["pseudo", "--dataset", s(&root), "--categories", s(&cats), "--out", s(&ph)]));
    let ckpt = d.join("m.ckpt");
    ok(rh(&[
        "train", "--dataset", s(&root), "--pseudo", s(&ph), "--out", s(&ckpt), "--d-model", "16", "--epochs", "4",
        "--seed", seed,
    ]));
    let preds = d.join("preds");
    ok(rh(&["predict", "--checkpoint", s(&ckpt), "--dataset", s(&root), "--out", s(&preds)]));
    ok(rh(&["eval", "--dataset", s(&root), "--predictions", s(&preds)]));

    assert_eq!(read(&cats.join("pseudo_categories.json")), read(&d.join("pipe/pseudo_categories.json")));
    assert_eq!(read(&ph), read(&d.join("pipe/pseudo_highlights.json")));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(d.join("pipe/model.ckpt")).unwrap());
    assert_eq!(read(&preds.join("report.json")), read(&d.join("pipe/report.json")));
}

#[test]
fn pipeline_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let root = small_dataset(d, 4);
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        let cfg = run_config(d, &root, &out, 9);
        ok(rh(&["pipeline", "--config", s(&cfg)]));
        hashes.push((fs::read(out.join("artifacts.json")).unwrap(), fs::read(out.join("report.json")).unwrap()));
    }
    assert_eq!(hashes[0], hashes[1]);
    let manifest = read(&d.join("a/artifacts.json"));
    for name in ["model.ckpt", "report.json", "pseudo_highlights.json", "pseudo_categories.json", "run_config.json"] {
        assert!(manifest["files"].get(name).is_some(), "{name} not hashed");
    }
}

#[test]
fn ablate_without_axes_matches_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let root = small_dataset(d, 5);
    let cfg = run_config(d, &root, &d.join("pipe"), 1);
    ok(rh(&["pipeline", "--config", s(&cfg)]));
    let ab = d.join("ab");
    ok(rh(&["ablate", "--dataset", s(&root), "--config", s(&cfg), "--seeds", "1", "--out", s(&ab)]));
    let table = read(&ab.join("ablation.json"));
    let report = read(&d.join("pipe/report.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 1);
    assert_eq!(table["rows"][0]["mAP"]["mean"], report["mAP"]);
    assert_eq!(table["rows"][0]["hit_at_1"]["mean"], report["hit_at_1"]);
    assert!(ab.join("ablation.txt").exists());
}

#[test]
fn ablate_sweeps_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let root = small_dataset(d, 6);
    let cfg = run_config(d, &root, &d.join("unused"), 0);
    let ab = d.join("ab");
    let stdout = ok(rh(&[
        "ablate", "--dataset", s(&root), "--config", s(&cfg), "--seeds", "0,1", "--out", s(&ab), "--axes",
        r#"{"predictor": ["network", "pseudo-scores"], "metric": ["cosine", "pcc"]}"#,
    ]));
    let table = read(&ab.join("ablation.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 4);
    assert_eq!(table["seeds"], json!([0, 1]));
    assert!(stdout.contains("metric=pcc predictor=pseudo-scores"), "{stdout}");
}

#[test]
fn bad_axes_and_metric_mismatch_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let root = small_dataset(d, 7);
    let out = rh(&["ablate", "--dataset", s(&root), "--out", s(&d.join("ab")), "--axes", r#"{"colour": [1]}"#]);
    assert_eq!(code(&out), 1);

    let cats = d.join("cats");
    ok(rh(&["cluster", "--dataset", s(&root), "--out", s(&cats), "--k-min", "2", "--k-max", "4"]));
    let ph = d.join("ph.json");
    ok(rh(&["pseudo", "--dataset", s(&root), "--categories", s(&cats), "--out", s(&ph), "--metric", "pcc"]));
    let out = rh(&[
        "train", "--dataset", s(&root), "--pseudo", s(&ph), "--out", s(&d.join("m.ckpt")), "--metric", "cosine",
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pcc"));
}

#[test]
fn predict_with_corrupt_checkpoint_exits_with_train_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let root = small_dataset(d, 8);
    let ckpt = d.join("m.ckpt");
    fs::write(&ckpt, b"AVHC\x01\x00\x00\x00").unwrap();
    let out = rh(&["predict", "--checkpoint", s(&ckpt), "--dataset", s(&root), "--out", s(&d.join("p"))]);
    assert_eq!(code(&out), 40);
}
