use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use stagequant::config::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stagequant"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cli")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.task.train_samples = 256;
    cfg.task.eval_samples = 64;
    cfg.pretrain.steps = 150;
    cfg.plan.adaround.iterations = 30;
    cfg.plan.calibration_samples = 32;
    for s in &mut cfg.plan.stages {
        s.steps /= 100;
        s.distill.gamma_estimation_steps = 5;
    }
    cfg.log_every = 2;
    let path = dir.join("small.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["bogus"],
        vec!["train", "--no-such-flag"],
        vec!["train", "--stage-plan", "sideways"],
        vec!["quantize-rtn", "--baseline", "gptq"],
        vec![],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(
            err.contains("Usage") || err.contains("possible values"),
            "{err}"
        );
    }
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.spdq");
    let out = run(&["eval", "--model", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.spdq"));

    let out = run(&["report", "--run", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&["train", "--config", s(&bad)]).status.code(), Some(1));

    let out = run(&["train", "--bits", "5", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bits"));
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("data");
    let v = ok_json(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(v["train"], 256);
    let data: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(data["train"]["labels"].as_array().unwrap().len(), 256);
    assert_eq!(data["eval"]["images"].as_array().unwrap().len(), 64);
    assert_eq!(data["eval"]["images"][0].as_array().unwrap().len(), 64);
    assert!(out.join("config.json").exists());
}

#[test]
fn train_writes_a_reproducible_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run_a = dir.path().join("a");
    let summary = ok_json(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&run_a),
        "--seed",
        "9",
    ]);

    for f in [
        "config.json",
        "calibration.json",
        "steps.jsonl",
        "gradients.csv",
        "summary.json",
        "model.spdq",
        "teacher.spdq",
    ] {
        assert!(run_a.join(f).exists(), "{f}");
    }
    let steps = std::fs::read_to_string(run_a.join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 13);
    for line in steps.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"].as_u64().unwrap() % 2, 0);
    }
    let csv = std::fs::read_to_string(run_a.join("gradients.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,vision,projector,language"));
    assert_eq!(csv.lines().count(), 14);
    let calib: Value =
        serde_json::from_str(&std::fs::read_to_string(run_a.join("calibration.json")).unwrap())
            .unwrap();
    assert_eq!(calib.as_array().unwrap().len(), 4);
    assert_eq!(summary["stages"].as_array().unwrap().len(), 3);

    let eval = ok_json(&[
        "eval",
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "--model",
        s(&run_a.join("model.spdq")),
    ]);
    assert_eq!(eval["accuracy"], summary["final_accuracy"]);

    let run_b = dir.path().join("b");
    let resolved = run_a.join("config.json");
    ok_json(&["train", "--config", s(&resolved), "--out", s(&run_b)]);
    let a = std::fs::read(run_a.join("model.spdq")).unwrap();
    let b = std::fs::read(run_b.join("model.spdq")).unwrap();
    assert_eq!(a, b);

    let report = ok_json(&["report", "--run", s(&run_a)]);
    let bytes = report["containers"]["model.spdq"]["file_bytes"]
        .as_u64()
        .unwrap();
    assert_eq!(bytes, a.len() as u64);
    assert_eq!(
        report["summaries"]["summary.json"]["container_bytes"],
        bytes
    );
    assert!(report["summaries"]["summary.json"]["final_accuracy"].is_number());
    assert!(report["summaries"]["summary.json"]["average_bitwidth"]["vision"].is_number());
}

#[test]
fn rtn_baseline_and_joint_plan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let base = dir.path().join("base");
    ok_json(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&base),
        "--stage-plan",
        "joint",
    ]);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(base.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stages"].as_array().unwrap().len(), 1);
    assert_eq!(summary["stages"][0]["kind"], "joint_qat");

    let teacher = base.join("teacher.spdq");
    let two = dir.path().join("rtn2");
    let four = dir.path().join("rtn4");
    let r2 = ok_json(&[
        "quantize-rtn",
        "--config",
        s(&cfg),
        "--teacher",
        s(&teacher),
        "--bits",
        "2",
        "--group",
        "16",
        "--scale-bits",
        "0",
        "--out",
        s(&two),
        "--baseline",
        "rtn",
    ]);
    let r4 = ok_json(&[
        "quantize-rtn",
        "--config",
        s(&cfg),
        "--teacher",
        s(&teacher),
        "--bits",
        "4",
        "--group",
        "16",
        "--scale-bits",
        "0",
        "--out",
        s(&four),
    ]);
    assert_eq!(r2["average_bitwidth"], 3.125);
    assert!(r2["container_bytes"].as_u64() < r4["container_bytes"].as_u64());
    assert!(r2["container_bytes"].as_u64().unwrap() < std::fs::metadata(&teacher).unwrap().len());
    assert!(!two.join("teacher.spdq").exists());
    let report = ok_json(&["report", "--run", s(&two)]);
    assert!(report["containers"]["rtn.spdq"]["file_bytes"].is_number());
}

#[test]
fn calibrate_dumps_both_towers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("cal");
    let v = ok_json(&[
        "calibrate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--group",
        "32",
    ]);
    assert_eq!(v["vision"].as_array().unwrap().len(), 2);
    assert_eq!(v["language"].as_array().unwrap().len(), 2);
    assert!(v["vision"][0]["block_mse"].is_number());
    assert!(v["language"][0]["block_mse"].is_null());
    let resolved = RunConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(resolved.plan.vision_spec.group_size, 32);
}
