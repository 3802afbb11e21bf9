use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rla"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = rla(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn fails(args: &[&str]) -> Value {
    let out = rla(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let v: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    v["error"].clone()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny recipe: 64-sample preambles, a two-layer extractor and a few epochs.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    ok(&["init-config", "--out", s(&path)]);
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["preamble"]["length"] = json!(64);
    cfg["architecture"] = json!({
        "signal_len": 64,
        "convs": [
            {"out_channels": 8, "width": 5, "stride": 2},
            {"out_channels": 8, "width": 5, "stride": 2}
        ],
        "embed_dim": 16
    });
    cfg["counts"] = json!({"base_per_pair": 6, "pool_per_pair": 6, "target_per_device": 10});
    for t in ["base_trainer", "lora_trainer", "ft_trainer"] {
        cfg[t]["max_epochs"] = json!(3);
        cfg[t]["min_epochs"] = json!(0);
        cfg[t]["auc_stop"] = Value::Null;
        cfg[t]["batch_size"] = json!(8);
    }
    cfg["lora"]["rank"] = json!(2);
    cfg["pool_environments"] = json!(["e5", "e4"]);
    cfg["cmaes"]["max_iterations"] = json!(3);
    cfg["evaluation"]["max_pairs"] = json!(2000);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let data = dir.join("data");
    let run = dir.join("run");
    let pool = dir.join("pool");
    let c = s(&cfg);

    ok(&["gen-data", "--config", c, "--out", s(&data)]);
    let base = run.join("base.json");
    ok(&[
        "train-base",
        "--config",
        c,
        "--data",
        s(&data.join("base.json")),
        "--out",
        s(&base),
    ]);
    for env in ["e5", "e4"] {
        let out = ok(&[
            "train-lora",
            "--config",
            c,
            "--base",
            s(&base),
            "--data",
            s(&data.join("pool.json")),
            "--env",
            env,
            "--out",
            s(&pool.join(format!("lora_{env}.json"))),
        ]);
        assert_eq!(out["environment_id"], env);
    }
    let adapt = s(&data.join("target_adapt.json")).to_string();
    let rla_out = run.join("rla.json");
    let r = ok(&[
        "adapt-rla",
        "--config",
        c,
        "--base",
        s(&base),
        "--pool-dir",
        s(&pool),
        "--data",
        &adapt,
        "--out",
        s(&rla_out),
    ]);
    assert_eq!(r["result"]["alpha"].as_array().unwrap().len(), 2);
    // λ(2) = 4 + ⌊3 ln 2⌋ = 6, three generations
    assert_eq!(r["result"]["evaluations"], 18);
    assert_eq!(r["counters"]["backward_passes"], 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(&rla_out).unwrap()).unwrap();
    assert_eq!(report["environments"], json!(["e4", "e5"]));

    ok(&[
        "adapt-ft",
        "--config",
        c,
        "--base",
        s(&base),
        "--data",
        &adapt,
        "--out",
        s(&run.join("ft_model.json")),
    ]);
    ok(&[
        "adapt-lora",
        "--config",
        c,
        "--base",
        s(&base),
        "--data",
        &adapt,
        "--out",
        s(&run.join("lora_target.json")),
    ]);

    let eval_data = s(&data.join("target_eval.json")).to_string();
    let evals = dir.join("evals");
    let e_base = ok(&[
        "eval",
        "--config",
        c,
        "--base",
        s(&base),
        "--data",
        &eval_data,
        "--out",
        s(&evals.join("none.json")),
    ]);
    ok(&[
        "eval",
        "--config",
        c,
        "--base",
        s(&base),
        "--rla",
        s(&rla_out),
        "--pool-dir",
        s(&pool),
        "--data",
        &eval_data,
        "--out",
        s(&evals.join("rla.json")),
    ]);
    ok(&[
        "eval",
        "--config",
        c,
        "--base",
        s(&run.join("ft_model.json")),
        "--data",
        &eval_data,
        "--out",
        s(&evals.join("ft.json")),
    ]);
    ok(&[
        "eval",
        "--config",
        c,
        "--base",
        s(&base),
        "--adapter",
        s(&run.join("lora_target.json")),
        "--data",
        &eval_data,
        "--out",
        s(&evals.join("lora.json")),
    ]);
    assert!(evals.join("none.csv").exists());

    // zero weights reproduce the plain base exactly
    let mut zero: Value = report.clone();
    zero["outcome"]["weights"] = json!([0.0, 0.0]);
    let zero_path = run.join("rla_zero.json");
    fs::write(&zero_path, serde_json::to_string(&zero).unwrap()).unwrap();
    let e_zero = ok(&[
        "eval",
        "--config",
        c,
        "--base",
        s(&base),
        "--rla",
        s(&zero_path),
        "--pool-dir",
        s(&pool),
        "--data",
        &eval_data,
        "--label",
        "zero",
        "--out",
        s(&dir.join("zero_eval.json")),
    ]);
    assert_eq!(e_zero["eer"], e_base["eer"]);
    assert_eq!(e_zero["auc"], e_base["auc"]);

    let summary = ok(&["report", "--run-dir", s(&evals)]);
    assert_eq!(summary["rows"], 4);
    let table = fs::read_to_string(evals.join("summary.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, vec!["ft", "lora", "none", "rla"]);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    let commands: Vec<&str> = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["command"].as_str().unwrap())
        .collect();
    assert_eq!(commands, vec!["train-base", "adapt-rla", "adapt-ft", "adapt-lora"]);
    assert!(manifest["entries"][0]["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let c = s(&cfg);
    for run in ["a", "b"] {
        let d = dir.join(run);
        ok(&["gen-data", "--config", c, "--seed", "7", "--out", s(&d)]);
        ok(&[
            "train-base",
            "--config",
            c,
            "--seed",
            "7",
            "--data",
            s(&d.join("base.json")),
            "--out",
            s(&d.join("base_model.json")),
        ]);
    }
    for f in [
        "base.bin",
        "pool.bin",
        "target_adapt.bin",
        "target_eval.bin",
        "base_model.bin",
    ] {
        assert_eq!(
            fs::read(dir.join("a").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    ok(&["gen-data", "--config", c, "--seed", "8", "--out", s(&dir.join("c"))]);
    assert_ne!(
        fs::read(dir.join("a/base.bin")).unwrap(),
        fs::read(dir.join("c/base.bin")).unwrap()
    );
}

#[test]
fn default_config_generates_full_length_preambles() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "--out", s(&out)]);
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("base.json")).unwrap()).unwrap();
    assert_eq!(m["content"]["signal_len"], 1280);
    assert_eq!(m["format"], "rla-dataset");
    let bytes = fs::metadata(out.join("base.bin")).unwrap().len();
    assert_eq!(bytes, 5 * 3 * 30 * 1280 * 8);
}

#[test]
fn failures_emit_error_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let c = s(&cfg);

    let e = fails(&[
        "train-base",
        "--config",
        c,
        "--data",
        s(&dir.join("missing.json")),
        "--out",
        s(&dir.join("m.json")),
    ]);
    assert_eq!(e["kind"], "io");
    assert!(e["path"].as_str().unwrap().ends_with("missing.json"));

    let mut bad: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    bad["target_environment"] = json!("e9");
    let bad_path = dir.join("bad.json");
    fs::write(&bad_path, bad.to_string()).unwrap();
    let e = fails(&["gen-data", "--config", s(&bad_path), "--out", s(&dir.join("x"))]);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["field"], "target_environment");

    let data = dir.join("data");
    ok(&["gen-data", "--config", c, "--out", s(&data)]);
    let base = dir.join("base.json");
    ok(&[
        "train-base",
        "--config",
        c,
        "--data",
        s(&data.join("base.json")),
        "--out",
        s(&base),
    ]);

    // corrupted payload
    let bin = data.join("target_eval.bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes[10] ^= 0xff;
    fs::write(&bin, bytes).unwrap();
    let e = fails(&[
        "eval",
        "--config",
        c,
        "--base",
        s(&base),
        "--data",
        s(&data.join("target_eval.json")),
        "--out",
        s(&dir.join("e.json")),
    ]);
    assert_eq!(e["kind"], "format");

    // checkpoint from a future version
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&base).unwrap()).unwrap();
    m["version"] = json!(99);
    fs::write(&base, m.to_string()).unwrap();
    let e = fails(&[
        "adapt-ft",
        "--config",
        c,
        "--base",
        s(&base),
        "--data",
        s(&data.join("target_adapt.json")),
        "--out",
        s(&dir.join("f.json")),
    ]);
    assert_eq!(e["kind"], "format");
    assert!(e["message"].as_str().unwrap().contains("version 99"));

    let empty = dir.join("empty_pool");
    fs::create_dir(&empty).unwrap();
    m["version"] = json!(1);
    fs::write(&base, m.to_string()).unwrap();
    let e = fails(&[
        "adapt-rla",
        "--config",
        c,
        "--base",
        s(&base),
        "--pool-dir",
        s(&empty),
        "--data",
        s(&data.join("target_adapt.json")),
        "--out",
        s(&dir.join("r.json")),
    ]);
    assert_eq!(e["kind"], "io");
}
