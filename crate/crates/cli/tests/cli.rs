use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "tasks": {"train": 4, "eval": 5, "rl": 8, "reference": 12},
  "reference": {"learning_rate": 1.0, "epochs": 200},
  "sft": {"learning_rate": 4.0, "epochs": 200},
  "synthesis": {"k": 4, "min_token_saving": 16},
  "rl": {"n": 4, "tasks_per_step": 4, "checkpoint_every": 1},
  "eval": {"seeds": [1, 2]},
  "analysis": {"k": 4, "tasks": 2},
  "theory": {"scales": [0.0, 0.3], "rollouts": 3, "seeds": [0, 1], "tasks": 2}
}"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agent-omit")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let o = bin(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files_under(dir: &Path) -> Vec<String> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<String>) {
        for e in fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.retain(|f| f != "manifest.json");
    out.sort();
    out
}

fn assert_manifest_complete(dir: &Path) {
    let m = manifest(dir);
    let mut listed: Vec<String> =
        m["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap().to_string()).collect();
    listed.sort();
    assert_eq!(listed, files_under(dir));
    assert!(m["config"].is_object() && m["seeds"].is_object() && m["tool_version"].is_string());
}

#[test]
fn oracle_eval_solves_every_craftworld_easy_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    run_ok(&["eval", "--out", p(&out)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["actor"], "oracle");
    assert_eq!(report["summary"]["success_rate"], 1.0);
    assert_eq!(report["summary"]["episodes"], 150);
    assert_eq!(report["summary"]["mean_omitted_turns"], 0.0);
    assert!(report["histogram"].as_array().unwrap().iter().all(|h| h["any_rate"] == 0.0));
    assert_manifest_complete(&out);
}

#[test]
fn config_errors_exit_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for (doc, field) in [(r#"{"rl": {"nn": 3}}"#, "nn"), (r#"{"rl": {"n": 1}}"#, "rl.n"), (r#"{"env": "chess"}"#, "chess")] {
        let path = dir.path().join("bad.json");
        fs::write(&path, doc).unwrap();
        let o = bin(&["eval", "--config", p(&path), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(1), "{doc}");
        assert!(String::from_utf8_lossy(&o.stderr).contains(field), "{doc}");
    }
    let o = bin(&["eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`out`"));
    assert_eq!(bin(&["eval", "--out", p(&out), "--workers", "0"]).status.code(), Some(1));
    assert_eq!(bin(&["nonsense"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let o = bin(&["eval", "--out", p(&dir.path().join("x")), "--policy", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["report", "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn train_run(dir: &Path, name: &str, workers: &str) -> PathBuf {
    let config = small_config(dir);
    let out = dir.join(name);
    run_ok(&["train", "--config", &config, "--out", p(&out), "--workers", workers]);
    out
}

#[test]
fn identical_configs_give_byte_identical_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_run(dir.path(), "a", "1");
    let b = train_run(dir.path(), "b", "3");
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.contains(&"metrics.jsonl".to_string()));
    assert!(files.contains(&"final.ckpt".to_string()));
    assert!(files.contains(&"checkpoints/step_001.ckpt".to_string()));
    assert!(files.contains(&"cold_start/sft.ckpt".to_string()));
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(manifest(&a)["artifacts"], manifest(&b)["artifacts"]);
    assert_manifest_complete(&a);
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let c = dir.path().join("c");
    let config = small_config(dir.path());
    run_ok(&["train", "--config", &config, "--out", p(&c), "--seed", "9"]);
    assert_ne!(fs::read(c.join("metrics.jsonl")).unwrap(), metrics.as_bytes());
    assert_eq!(manifest(&c)["seeds"]["rl"], 9);
}

#[test]
fn staged_pipeline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let d = |n: &str| dir.path().join(n);
    run_ok(&["synthesize", "--config", &config, "--out", p(&d("syn"))]);
    for f in ["sources.jsonl", "rewrites.jsonl", "single_turn.jsonl", "multi_turn.jsonl", "marks.jsonl"] {
        assert!(d("syn").join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(d("syn").join("single_turn.jsonl")).unwrap().lines().count() > 0);

    run_ok(&["sft", "--config", &config, "--out", p(&d("sft")), "--data", p(&d("syn"))]);
    let loss = fs::read_to_string(d("sft").join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 201);
    let inputs = manifest(&d("sft"))["inputs"].to_string();
    assert!(inputs.contains("single_turn.jsonl") && inputs.contains("config.json"));

    let sft = d("sft").join("sft.ckpt");
    run_ok(&["train", "--config", &config, "--out", p(&d("rl")), "--policy", p(&sft)]);
    run_ok(&["eval", "--config", &config, "--out", p(&d("ev")), "--policy", p(&d("rl").join("final.ckpt"))]);
    run_ok(&["analyze", "--config", &config, "--out", p(&d("an")), "--policy", p(&sft)]);
    run_ok(&["verify-theory", "--config", &config, "--out", p(&d("th")), "--policy", p(&sft)]);
    let attribution = fs::read_to_string(d("an").join("attribution.csv")).unwrap();
    assert!(attribution.starts_with("turn,pass1,passk,tokens,tasks\n"));
    assert!(fs::read_to_string(d("th").join("bounds.csv")).unwrap().lines().count() > 1);

    run_ok(&["report", "--out", p(&d("rep")), "--data", p(&d("ev")), "--data", p(&d("rl")), "--data", p(&d("an"))]);
    let md = fs::read_to_string(d("rep").join("report.md")).unwrap();
    assert!(md.contains("## Evaluation") && md.contains("## Training"));
    let csv = fs::read_to_string(d("rep").join("summary.csv")).unwrap();
    assert!(csv.contains("ev,eval,success_rate,") && csv.contains("rl,train,steps,2"));
    for dir in ["syn", "sft", "rl", "ev", "an", "th", "rep"] {
        assert_manifest_complete(&d(dir));
    }
}
