use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use insightr_core::checkpoint::{Checkpoint, FORMAT_VERSION};
use insightr_core::config::{AblationConfig, RunConfig};
use serde_json::Value;

fn insightr(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_insightr"))
        .args(args)
        .env("INSIGHTR_OUT_ROOT", root.join("runs"))
        .env("INSIGHTR_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str], root: &Path) -> String {
    let out = insightr(args, root);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny_config(root: &Path) -> String {
    let mut cfg = RunConfig::tiny();
    cfg.ablation = AblationConfig {
        similarity: Some(vec![cfg.prototypes.similarity]),
        alpha_clst: Some(vec![cfg.loss.alpha_clst]),
        alpha_psd: Some(vec![cfg.loss.alpha_psd]),
        k: Some(vec![cfg.loss.k]),
        seeds: Some(1),
    };
    let path = root.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_workflow_on_the_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = tiny_config(root);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    let train = root.join("train");

    ok(&["gen-data", "--config", &cfg, "--out", &s(&data)], root);
    assert!(data.join("train.insd").exists() && data.join("test.insd").exists());

    ok(&["train", "--config", &cfg, "--data", &s(&data), "--out", &s(&train)], root);
    for f in ["checkpoint.insck", "training_log.csv", "projections.json", "train_metrics.json", "test_metrics.json"] {
        assert!(train.join(f).exists(), "missing {f}");
    }
    let echoed = RunConfig::load(&train.join("config.toml")).unwrap();
    assert_eq!(echoed.schedule, RunConfig::load(Path::new(&cfg)).unwrap().schedule);
    let projections = json(&train.join("projections.json"));
    assert_eq!(projections.as_array().unwrap().len(), 1);

    let ck = s(&train.join("checkpoint.insck"));
    let eval = root.join("eval");
    ok(&["eval", "--checkpoint", &ck, "--data", &s(&data.join("train.insd")), "--out", &s(&eval)], root);
    assert_eq!(
        fs::read(eval.join("metrics.json")).unwrap(),
        fs::read(train.join("train_metrics.json")).unwrap()
    );
    assert!(eval.join("config.toml").exists());
    let samples = fs::read_to_string(eval.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 12);

    let explain = root.join("explain");
    let test_file = s(&data.join("test.insd"));
    let stdout = ok(
        &["explain", "--checkpoint", &ck, "--data", &test_file, "--sample-ids", "0,3", "--top-k", "2", "--out", &s(&explain)],
        root,
    );
    assert!(stdout.contains("sample 3"));
    let e = json(&explain.join("explanation_3.json"));
    assert_eq!(e["top_k"], 2);
    assert_eq!(e["records"].as_array().unwrap().len(), 3);
    assert!(explain.join("sample0_input.pgm").exists());
    let maps = fs::read_dir(&explain)
        .unwrap()
        .filter(|f| f.as_ref().unwrap().file_name().to_string_lossy().starts_with("sample3_proto"))
        .count();
    assert_eq!(maps, 2);
    let pgm = fs::read(explain.join("sample0_input.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));

    let embed = root.join("embed");
    ok(&["embed", "--checkpoint", &ck, "--data", &test_file, "--per-sample", "2", "--out", &s(&embed)], root);
    for f in ["embedding.csv", "embedding.svg", "usage.svg", "embedding.json"] {
        assert!(embed.join(f).exists(), "missing {f}");
    }

    let ablate = root.join("ablate");
    ok(&["ablate", "--config", &cfg, "--data", &s(&data), "--out", &s(&ablate)], root);
    let csv = fs::read_to_string(ablate.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let test_metrics = json(&train.join("test_metrics.json"));
    let cols: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(cols[5].parse::<f64>().unwrap(), test_metrics["mae"].as_f64().unwrap());
    assert_eq!(cols[8].parse::<u64>().unwrap(), test_metrics["diversity"].as_u64().unwrap());
}

#[test]
fn default_output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&["gen-data", "--config", &cfg], tmp.path());
    assert!(tmp.path().join("runs/data/train.insd").exists());
    assert!(tmp.path().join("runs/data/config.toml").exists());
}

#[test]
fn grad_check_passes_on_the_tiny_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["grad-check"], tmp.path());
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 8);
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn config_template_parses_to_the_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["config-template"], tmp.path());
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), RunConfig::default());
}

fn error_of(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(2));
    serde_json::from_slice(&out.stderr).unwrap()
}

#[test]
fn missing_inputs_fail_with_a_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = insightr(&["eval", "--checkpoint", "/nonexistent.insck", "--data", "/nonexistent.insd"], root);
    let err = error_of(&out);
    assert_eq!(err["command"], "eval");
    assert!(err["error"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "seed = 0\n[schedule]\ncycles = 1\nlearning_rate = 0.1\n").unwrap();
    let out = insightr(&["gen-data", "--config", path.to_str().unwrap()], tmp.path());
    let err = error_of(&out);
    assert!(err["error"].as_str().unwrap().contains("learning_rate"), "{err}");
}

#[test]
fn checkpoint_version_mismatch_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = RunConfig::tiny();
    let mut bytes = Checkpoint {
        config: cfg.clone(),
        cursor: insightr_core::trainer::StageState::start(),
        model: insightr_core::pipeline::build_model(&cfg).unwrap(),
    }
    .to_bytes();
    bytes[5..9].copy_from_slice(&(FORMAT_VERSION + 7).to_le_bytes());
    let ck = root.join("old.insck");
    fs::write(&ck, bytes).unwrap();
    let data = root.join("data");
    let cfg_path = tiny_config(root);
    ok(&["gen-data", "--config", &cfg_path, "--out", data.to_str().unwrap()], root);
    let out = insightr(
        &["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.join("test.insd").to_str().unwrap()],
        root,
    );
    let err = error_of(&out);
    assert!(err["error"].as_str().unwrap().contains("version"), "{err}");
}
