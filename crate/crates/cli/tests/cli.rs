use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ct_core::data::{collect_dataset, Dataset};
use ct_core::env::{EnvConfig, PolicyKind, TaskId};
use ct_core::model::Checkpoint;
use serde_json::{json, Value};

fn tiny_config() -> Value {
    json!({
        "seed": 3,
        "env": {"image_size": 8, "episode_length": 20},
        "data": {
            "pretrain_tasks": ["pendulum/swingup"],
            "pretrain_steps": 40,
            "finetune_tasks": ["pendulum/balance"],
            "finetune_steps": 40
        },
        "model": {"n_layers": 1, "n_heads": 2, "d_embed": 16, "T": 4, "image_shape": [8, 8, 3]},
        "training": {
            "pretrain": {"epochs": 2, "batch_size": 4, "steps_per_epoch": 3},
            "finetune": {"epochs": 2, "batch_size": 4, "steps_per_epoch": 3}
        },
        "eval": {"n_episodes": 2}
    })
}

fn write_config(dir: &Path, v: &Value) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn ct(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ct"));
    cmd.args(args).env_remove("CT_SEED").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stage(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    ct(&args, &[])
}

#[test]
fn stages_produce_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    ok(&stage("collect", &cfg, &out, &[]));
    ok(&stage("pretrain", &cfg, &out, &[]));
    ok(&stage("finetune", &cfg, &out, &["--init", "checkpoint"]));
    ok(&stage("finetune", &cfg, &out, &["--init", "scratch"]));
    let eval = stage("eval", &cfg, &out, &[]);
    ok(&eval);
    assert_eq!(String::from_utf8_lossy(&eval.stdout).lines().count(), 2);
    ok(&stage("report", &cfg, &out, &[]));
    let summary = fs::read_to_string(out.join("report").join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "task,mode,checkpoint_id,seed,n_episodes,mean_return,std_return,normalized_mean"
    );
    assert_eq!(lines.count(), 2);
    assert!(out.join("resolved_config.json").exists());
    assert!(out.join("report").join("curves").join("pendulum_balance__smart.png").exists());
    assert!(out.join("report").join("curves").join("pendulum_balance__scratch.png").exists());
}

#[test]
fn rtg_on_rewardless_data_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    let env = EnvConfig {
        image_size: 8,
        episode_length: 20,
    };
    let ds = collect_dataset(&[TaskId::PendulumBalance], PolicyKind::Expert, 40, 0, env).unwrap();
    ds.without_rewards()
        .save(out.join("data").join("finetune").join("pendulum_balance"))
        .unwrap();
    let res = stage(
        "finetune",
        &cfg,
        &out,
        &["--init", "scratch", "--set", "training.finetune.mode=rtg"],
    );
    assert!(!res.status.success());
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"], "ConfigError");
}

#[test]
fn seed_flag_beats_env_beats_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    ok(&stage("collect", &cfg, &out, &[]));
    let provenance_seed = |extra: &[&str], envs: &[(&str, &str)]| {
        let mut args = vec!["pretrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&ct(&args, envs));
        let ck = Checkpoint::load(&out.join("pretrain").join("checkpoint.ctck")).unwrap();
        ck.provenance().last().unwrap().seed
    };
    assert_eq!(provenance_seed(&[], &[]), 3);
    assert_eq!(provenance_seed(&[], &[("CT_SEED", "5")]), 5);
    assert_eq!(provenance_seed(&["--seed", "9"], &[("CT_SEED", "5")]), 9);
    let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 9);
}

#[test]
fn misspelled_key_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = tiny_config();
    v["model"]["nlayers"] = json!(2);
    let cfg = write_config(tmp.path(), &v);
    let res = stage("collect", &cfg, &tmp.path().join("run"), &[]);
    assert_eq!(res.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"], "SchemaError");
    assert!(err["message"].as_str().unwrap().contains("model.nlayers"));
}

#[test]
fn rerun_from_resolved_config_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let a = tmp.path().join("a");
    ok(&stage("collect", &cfg, &a, &["--deterministic", "--set", "model.dropout=0.2"]));
    ok(&stage("pretrain", &cfg, &a, &["--deterministic", "--set", "model.dropout=0.2"]));
    let echo = a.join("resolved_config.json");
    let b = tmp.path().join("b");
    ok(&stage("collect", &echo, &b, &[]));
    ok(&stage("pretrain", &echo, &b, &[]));
    let ds_a = Dataset::load(a.join("data").join("pretrain")).unwrap();
    let ds_b = Dataset::load(b.join("data").join("pretrain")).unwrap();
    assert_eq!(ds_a.content_hash(), ds_b.content_hash());
    let ck = |d: &Path| fs::read(d.join("pretrain").join("checkpoint.ctck")).unwrap();
    assert_eq!(ck(&a), ck(&b));
    assert_eq!(
        fs::read(a.join("pretrain").join("runlog.csv")).unwrap(),
        fs::read(b.join("pretrain").join("runlog.csv")).unwrap()
    );
}
