//! Drives the built binary end to end on a deliberately tiny profile:
//! exit codes, stdout contracts, artifact presence, and the output-dir
//! precedence rules.

use std::path::Path;
use std::process::{Command, Output};

use headatlas_core::pipeline::{RunConfig, ModelSpec, TrainSpec};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_headatlas")
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    // The ambient environment must not leak an out dir into tests.
    cmd.env_remove("HEADATLAS_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.args(args).output().expect("binary runs")
}

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::desk_default();
    cfg.model = ModelSpec {
        n_layers: 2,
        n_heads: 2,
        model_dim: 32,
        mlp_dim: 64,
        max_seq_len: 128,
        norm_eps: 1e-5,
        use_rms_norm: true,
        use_mlp: true,
    };
    cfg.corpus.n_entities = 24;
    cfg.train = TrainSpec {
        steps: 30,
        batch_size: 4,
        lr: 1e-3,
        warmup_steps: 5,
        grad_clip: 1.0,
        mode_weights: [1.0, 1.0, 0.5, 0.5],
        lr_min_fraction: 1.0,
        log_every: 10,
    };
    cfg.k_contextual = 2;
    cfg.k_parametric = 2;
    cfg.k_task = 1;
    cfg.k_retrieval = 1;
    cfg.n_score_prompts = 4;
    cfg.fv_alphas = vec![1.0];
    cfg.n_niah = 3;
    cfg
}

fn write_cfg(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&tiny_cfg()).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn init_config_prints_a_parseable_config() {
    let out = run(&["init-config"], &[]);
    assert!(out.status.success());
    let cfg: RunConfig = serde_json::from_slice(&out.stdout).expect("valid config JSON");
    cfg.validate().unwrap();

    let out = run(&["init-config", "--compact"], &[]);
    let compact: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert!(compact.corpus.n_entities < cfg.corpus.n_entities);
}

#[test]
fn unknown_config_field_is_a_clean_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut value = serde_json::to_value(tiny_cfg()).unwrap();
    value
        .as_object_mut()
        .unwrap()
        .insert("typo_knob".into(), serde_json::json!(3));
    std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
    let out = run(
        &["--config", path.to_str().unwrap(), "gen-data"],
        &[],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("typo_knob"), "stderr: {stderr}");
}

#[test]
fn stages_run_in_order_and_name_missing_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out_dir = dir.path().join("run");
    let out_str = out_dir.display().to_string();
    let base = ["--config", cfg.as_str(), "--out", out_str.as_str()];

    // Out-of-order invocation points at the missing producer stage.
    let out = run(&[&base[..], &["eval-qa"]].concat(), &[]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("run `headatlas gen-data` first")
            || stderr.contains("run `headatlas train` first"),
        "stderr: {stderr}"
    );

    let out = run(&[&base[..], &["gen-data"]].concat(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["config.json", "corpus.jsonl", "vocab.json", "qa_eval_closed.jsonl"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }

    let out = run(&[&base[..], &["eval-qa"]].concat(), &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `headatlas train` first"));

    let out = run(&[&base[..], &["train"]].concat(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("model.ckpt").exists());
    assert!(out_dir.join("train_log.csv").exists());

    let out = run(&[&base[..], &["eval-qa"]].concat(), &[]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["oracle"]["n"].as_u64().unwrap() > 0);

    let out = run(&[&base[..], &["localize-heads"]].concat(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("head_scores.csv").exists());

    let out = run(&[&base[..], &["specialize-heads"]].concat(), &[]);
    assert!(out.status.success());
    assert!(out_dir.join("head_sets.json").exists());

    let out = run(&[&base[..], &["ablate"]].concat(), &[]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["conditions"].as_array().unwrap().len(), 7);

    let out = run(&[&base[..], &["niah"]].concat(), &[]);
    assert!(out.status.success());
    assert!(out_dir.join("niah.json").exists());
}

#[test]
fn out_dir_env_var_is_honored_when_flag_is_absent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let env_out = dir.path().join("from_env");
    let out = run(
        &["--config", cfg.as_str(), "gen-data"],
        &[("HEADATLAS_OUT", env_out.to_str().unwrap())],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_out.join("corpus.jsonl").exists());
}

#[test]
fn mismatched_config_is_refused_not_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out_dir = dir.path().join("run");
    let out_str = out_dir.display().to_string();
    let out = run(&["--config", cfg.as_str(), "--out", out_str.as_str(), "gen-data"], &[]);
    assert!(out.status.success());

    // Same config, different seed via the override flag: same directory must
    // be rejected with a lineage error.
    let out = run(
        &["--config", cfg.as_str(), "--out", out_str.as_str(), "--seed", "99", "gen-data"],
        &[],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config hash mismatch"), "stderr: {stderr}");
}
