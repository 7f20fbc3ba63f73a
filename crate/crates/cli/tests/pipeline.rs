use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn emem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emem"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch emem")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = emem(dir, args);
    assert!(
        out.status.success(),
        "emem {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

/// Small dataset plus trained artifacts, all inside `dir`.
fn pipeline(dir: &Path) -> Vec<u8> {
    let common = ["--seed", "5", "--threads", "1"];
    let run = |args: &[&str]| ok(dir, &[args, &common[..]].concat());
    run(&["gen-data", "--per-class", "10", "--out", "d.jsonl"]);
    run(&["train-base", "--data", "d.jsonl", "--epochs", "2", "--out", "e.json"]);
    run(&["build-tree", "--taxonomy", "d.taxonomy.json", "--out", "t.json"]);
    run(&["implant", "--data", "d.jsonl", "--encoder", "e.json", "--tree", "t.json", "--out", "b.json"]);
    run(&[
        "train-ndt", "--data", "d.jsonl", "--encoder", "e.json", "--tree", "t.json", "--banks", "b.json", "--epochs",
        "1", "--out", "m.json",
    ]);
    run(&["eval", "--data", "d.jsonl", "--model", "m.json", "--encoder", "e.json"]).stdout
}

#[test]
fn version_lists_formats() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["--version"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for f in ["encoder/v1", "tree/v1", "emem-ndt/v1", "schema_version: 1"] {
        assert!(text.contains(f), "{text}");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["gen-data", "--seed", "7", "--per-class", "5", "--out", "a.jsonl"]);
    ok(p, &["gen-data", "--seed", "7", "--per-class", "5", "--out", "b.jsonl"]);
    assert_eq!(read(p, "a.jsonl"), read(p, "b.jsonl"));
    assert_eq!(read(p, "a.taxonomy.json"), read(p, "b.taxonomy.json"));
    let first = read(p, "a.jsonl");
    ok(p, &["gen-data", "--seed", "7", "--per-class", "5", "--out", "a.jsonl", "--force"]);
    assert_eq!(read(p, "a.jsonl"), first);
    ok(p, &["gen-data", "--seed", "8", "--per-class", "5", "--out", "c.jsonl"]);
    assert_ne!(read(p, "c.jsonl"), first);
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    std::fs::write(p.join("d.jsonl"), "keep me").unwrap();
    let out = emem(p, &["gen-data", "--seed", "1", "--per-class", "2", "--out", "d.jsonl"]);
    assert_eq!(code(&out), 1);
    assert_eq!(read(p, "d.jsonl"), b"keep me");
    ok(p, &["gen-data", "--seed", "1", "--per-class", "2", "--out", "d.jsonl", "--force"]);
    assert_ne!(read(p, "d.jsonl"), b"keep me");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    assert_eq!(code(&emem(p, &[])), 1);
    assert_eq!(code(&emem(p, &["no-such-command"])), 1);
    assert_eq!(code(&emem(p, &["gen-data", "--bogus"])), 1);
    // No seed from either the flag or a config file.
    assert_eq!(code(&emem(p, &["gen-data", "--out", "d.jsonl"])), 1);
    assert_eq!(code(&emem(p, &["build-tree", "--out", "t.json"])), 1);
    assert!(!p.join("d.jsonl").exists());
}

#[test]
fn data_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let out = emem(p, &["train-base", "--seed", "1", "--data", "missing.jsonl", "--out", "e.json"]);
    assert_eq!(code(&out), 2);
    std::fs::write(p.join("bad.jsonl"), "{\"instance_id\": 3}\n").unwrap();
    let out = emem(p, &["train-base", "--seed", "1", "--data", "bad.jsonl", "--out", "e.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:1"));
    std::fs::write(p.join("c.json"), r#"{"schema_version": 9, "seed": 1}"#).unwrap();
    let out = emem(p, &["gen-data", "--config", "c.json", "--out", "d.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["gen-data", "--seed", "2", "--per-class", "4", "--out", "d.jsonl"]);
    std::fs::write(
        p.join("c.json"),
        r#"{"schema_version": 1, "seed": 2,
            "base_train": {"epochs": 2, "lr_state": 1e200, "lr_graph": 1e200, "lr_head": 1e200}}"#,
    )
    .unwrap();
    let out = emem(p, &["train-base", "--config", "c.json", "--data", "d.jsonl", "--out", "e.json"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!p.join("e.json").exists());
}

#[test]
fn full_pipeline_is_reproducible_and_leaves_inputs_alone() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let report_a = pipeline(a.path());
    let report_b = pipeline(b.path());
    assert_eq!(report_a, report_b);
    for f in ["d.jsonl", "e.json", "t.json", "b.json", "m.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs between runs");
    }

    let report: serde_json::Value = serde_json::from_slice(&report_a).unwrap();
    let f1 = report["macro"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(report["classes"].as_array().unwrap().len(), 8);

    // A second identical eval with outputs touches nothing it reads.
    let p = a.path();
    let before: Vec<Vec<u8>> = ["d.jsonl", "e.json", "m.json"].iter().map(|f| read(p, f)).collect();
    let args = [
        "eval", "--seed", "5", "--data", "d.jsonl", "--model", "m.json", "--encoder", "e.json", "--format", "text",
        "--confusion", "c.csv", "--usage-out", "mu.json", "--out", "r.txt",
    ];
    ok(p, &args);
    let after: Vec<Vec<u8>> = ["d.jsonl", "e.json", "m.json"].iter().map(|f| read(p, f)).collect();
    assert_eq!(before, after);
    assert!(String::from_utf8(read(p, "c.csv")).unwrap().starts_with("truth\\predicted,"));
    assert!(String::from_utf8(read(p, "r.txt")).unwrap().contains("macro"));
    assert_eq!(code(&emem(p, &args)), 1, "second run must refuse to overwrite");
    let out = emem(p, &["eval", "--seed", "5", "--data", "d.jsonl", "--model", "m.json", "--encoder", "e.json", "--out", "m.json", "--force"]);
    assert_eq!(code(&out), 1, "an input may never be an output");
    assert_eq!(read(p, "m.json"), before[2]);
}

#[test]
fn explain_and_predict_emit_one_line_per_instance() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    pipeline(p);
    let lines: Vec<String> = String::from_utf8(read(p, "d.jsonl"))
        .unwrap()
        .lines()
        .take(3)
        .map(String::from)
        .collect();
    std::fs::write(p.join("i.jsonl"), lines.join("\n") + "\n").unwrap();

    let out = ok(p, &["explain", "--model", "m.json", "--encoder", "e.json", "--instance", "i.jsonl"]);
    let traces: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(traces.len(), 3);
    for (trace, line) in traces.iter().zip(&lines) {
        let inst: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(trace["instance_id"], inst["instance_id"]);
        let path = trace["path"].as_array().unwrap();
        assert_eq!(path.first().unwrap()["kind"], "root");
        assert_eq!(path.last().unwrap()["node_id"], trace["predicted_leaf"]);
        assert_eq!(trace["prototype"]["leaf_id"], trace["predicted_leaf"]);
    }

    let out = ok(p, &["predict", "--model", "m.json", "--encoder", "e.json", "--instance", "i.jsonl"]);
    let preds: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(preds.len(), 3);
    for (pred, trace) in preds.iter().zip(&traces) {
        assert_eq!(pred["predicted_label"], trace["predicted_label"]);
        let total: f64 = pred["leaf_probabilities"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l["probability"].as_f64().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn config_file_drives_the_pipeline_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    std::fs::create_dir(p.join("art")).unwrap();
    let cfg = r#"{
        "schema_version": 1,
        "seed": 3,
        "threads": 1,
        "eta": 0.9,
        "synthetic": {"class_counts": {
            "stopping": 3, "lane-keeping": 3, "accelerating-straight": 3, "decelerating-straight": 3,
            "turn-left": 3, "turn-right": 3, "lane-change-left": 3, "lane-change-right": 3}},
        "base_train": {"epochs": 1},
        "ndt_train": {"epochs": 1},
        "paths": {"data": "art/d.jsonl", "taxonomy": "art/d.taxonomy.json", "encoder": "art/e.json",
                  "tree": "art/t.json", "banks": "art/b.json", "model": "art/m.json"}
    }"#;
    std::fs::write(p.join("run.json"), cfg).unwrap();
    for cmd in ["gen-data", "train-base", "build-tree", "implant", "train-ndt"] {
        ok(p, &[cmd, "--config", "run.json"]);
    }
    let out = ok(p, &["eval", "--config", "run.json", "--partition", "all"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["total"], 24);
    let banks: serde_json::Value = serde_json::from_slice(&read(p, "art/b.json")).unwrap();
    assert_eq!(banks["banks"][0]["eta"], 0.9);

    // Flag overrides the configured threshold.
    ok(p, &["implant", "--config", "run.json", "--eta", "1.0", "--out", "b1.json"]);
    let banks: serde_json::Value = serde_json::from_slice(&read(p, "b1.json")).unwrap();
    assert_eq!(banks["banks"][0]["eta"], 1.0);

    let rows = ok(p, &["sweep-eta", "--config", "run.json", "--etas", "0.5,1.0"]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&rows.stdout).unwrap();
    assert_eq!(rows.len(), 2);
    let train_size = 8 * 2;
    assert_eq!(rows[1]["total_emb"], train_size);
}

#[test]
fn base_eval_reports_the_encoder_classifier() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    pipeline(p);
    let out = ok(p, &["eval", "--seed", "5", "--data", "d.jsonl", "--encoder", "e.json", "--base"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["total"], 16);
    let bad = emem(p, &["eval", "--seed", "5", "--data", "d.jsonl", "--encoder", "e.json", "--base", "--usage-out", "x.json"]);
    assert_eq!(code(&bad), 1);
}
