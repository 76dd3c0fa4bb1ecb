use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gatemabsa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatemabsa")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn gen_data(dir: &Path) {
    let out = gatemabsa(
        &["gen-synth", "--seed", "3", "--out", "data", "--examples", "12", "--tokens", "6", "--separation", "2"],
        dir,
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    fs::write(
        dir.path().join("config.json"),
        r#"{
            "learning_rate": 0.001,
            "epochs": 2,
            "patience": 2,
            "batch_size": 4,
            "model_dim": 8,
            "n_heads": 2,
            "train_manifest": "data/manifest.json",
            "dev_manifest": "data/manifest.json",
            "checkpoint_out": "out/model.gmwt",
            "log_path": "train.jsonl"
        }"#,
    )
    .unwrap();
    fs::create_dir(dir.path().join("out")).unwrap();

    let out = gatemabsa(&["train", "--config", "config.json"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(dir.path().join("out/model.gmwt").exists());
    assert_eq!(fs::read_to_string(dir.path().join("train.jsonl")).unwrap().lines().count(), 2);

    let out = gatemabsa(
        &["eval", "--checkpoint", "out/model.gmwt", "--manifest", "data/manifest.json", "--split", "dev"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(metrics["macro_f1"].is_number());
}

#[test]
fn inspect_prints_shapes_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let out = gatemabsa(&["inspect", "--record", "data/00000.gmab"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("token_feats   [6, 768]"), "{stdout}");
    assert!(stdout.contains("image_grid    [49, 2048]"), "{stdout}");
    assert!(stdout.contains("validation    ok"), "{stdout}");
    let mask = stdout.lines().find(|l| l.starts_with("aspect mask")).unwrap();
    assert_eq!(mask.split_whitespace().last().unwrap().len(), 6);
}

#[test]
fn truncated_record_reports_its_offset() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let path = dir.path().join("data/00001.gmab");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let out = gatemabsa(&["inspect", "--record", "data/00001.gmab"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("offset"), "{}", text(&out.stderr));
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gatemabsa(&["train", "--config", "nowhere.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("nowhere.json"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"learning_rat": 0.1}"#).unwrap();
    let out = gatemabsa(&["train", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("learning_rat"));
}

#[test]
fn missing_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let out = gatemabsa(&["eval", "--checkpoint", "none.gmwt", "--manifest", "data/manifest.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gatemabsa(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(gatemabsa(&["gen-synth", "--seed", "x"], dir.path()).status.code(), Some(1));
    let help = gatemabsa(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(text(&help.stdout).contains("gen-synth"));
}

#[test]
fn too_few_tokens_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = gatemabsa(
        &["gen-synth", "--seed", "1", "--out", "d", "--examples", "3", "--tokens", "1", "--separation", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}
