mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pie_core::eval::read_pgm;
use pie_core::manifest::RunManifest;
use serde_json::Value;

fn pie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pie")).args(args).output().expect("run pie")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = r#"{"epsilonSq":0.1,"maxSteps":12,"seed":5,"dimSchedule":[1],"batchSize":32,"kRepeats":1,"evalEvery":4}"#;

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = pie(&["train", "--config", s(&dir.path().join("none.json")), "--data", "synthetic:ring", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"epsilonSq":0.1,"maxSteps":1,"dimSchedule":[1],"lr":3}"#);
    let out = pie(&["train", "--config", s(&cfg), "--data", "synthetic:ring", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = pie(&["train", "--config", s(&cfg), "--data", "synthetic:spiral", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = pie(&["train", "--config", s(&cfg), "--data", s(&dir.path().join("x.idx")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn overflowing_data_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let csv = dir.path().join("huge.csv");
    std::fs::write(&csv, "x,y\n1e200,1e200\n-1e200,3e200\n2e200,1\n1,1\n").unwrap();
    let out = pie(&["train", "--config", s(&cfg), "--data", s(&csv), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_steps_writes_manifest_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"epsilonSq":0.1,"maxSteps":0,"dimSchedule":[1]}"#);
    let run = dir.path().join("run");
    let out = pie(&["train", "--config", s(&cfg), "--data", "synthetic:two-moons:300", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["finalStep"], 0);
    let mut names: Vec<String> = std::fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, vec!["checkpoint-00000000.json", "loss_log.csv", "manifest.json"]);
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.artifact_paths.len(), 2);
    assert_eq!(manifest.verify(&run), None);
    assert!(manifest.dataset_fingerprint.is_some());
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = pie(&["train", "--config", s(&cfg), "--data", "synthetic:two-gaussians:400:2", "--out", s(&run)]);
        assert_eq!(out.status.code(), Some(0));
        logs.push(std::fs::read(run.join("loss_log.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(String::from_utf8_lossy(&logs[0]).lines().count(), 14);
}

fn digit_checkpoint(dir: &Path) -> (PathBuf, String) {
    let (img, lab) = common::write_digit_idx(dir, 40, 3);
    let cfg = write_config(
        dir,
        r#"{"epsilonSq":0.01,"maxSteps":2,"dimSchedule":[392,196,64,10],"convBlocks":2,"finalBlock":true,"batchSize":8,"dequantize":true,"kRepeats":1}"#,
    );
    let data = format!("{},{}", s(&img), s(&lab));
    let run = dir.join("run");
    let out = pie(&["train", "--config", s(&cfg), "--data", &data, "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    (run.join("checkpoint-00000002.json"), data)
}

#[test]
fn image_eval_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = digit_checkpoint(dir.path());

    let mut grids = Vec::new();
    for name in ["s1", "s2"] {
        let o = dir.path().join(name);
        let out = pie(&["eval", "--checkpoint", s(&ck), "--task", "sample", "--count", "4", "--prior-std", "0.5", "--seed", "11", "--out", s(&o)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        grids.push(std::fs::read(o.join("sample.pgm")).unwrap());
    }
    assert_eq!(grids[0], grids[1]);
    let g = read_pgm(&grids[0]).unwrap();
    assert_eq!((g.width, g.height), (56, 56));

    let o = dir.path().join("interp");
    let out = pie(&["eval", "--checkpoint", s(&ck), "--task", "interpolate", "--steps", "2", "--data", &data, "--png", "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let g = read_pgm(&std::fs::read(o.join("interpolate.pgm")).unwrap()).unwrap();
    assert_eq!((g.width, g.height), (56, 28));
    assert!(o.join("interpolate.png").exists());

    let o = dir.path().join("recon");
    let out = pie(&["eval", "--checkpoint", s(&ck), "--task", "reconstruct", "--count", "3", "--data", &data, "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(0));
    let j = stdout_json(&out);
    assert!(j["mse"].as_f64().unwrap() >= 0.0);
    let g = read_pgm(&std::fs::read(o.join("reconstruct.pgm")).unwrap()).unwrap();
    assert_eq!((g.width, g.height), (84, 56));

    let o = dir.path().join("sharp");
    let out = pie(&["eval", "--checkpoint", s(&ck), "--task", "sharpness", "--count", "20", "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(0));
    let j = stdout_json(&out);
    assert_eq!(j["source"], "model-samples");
    assert_eq!(j["sampleCount"], 20);
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(o.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.verify(&o), None);
}

#[test]
fn dataset_sharpness_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = common::write_digit_idx(dir.path(), 10, 4);
    let o = dir.path().join("sharp");
    let out = pie(&["eval", "--task", "sharpness", "--data", s(&img), "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let j = stdout_json(&out);
    assert_eq!(j["source"], "dataset");
    assert_eq!(j["sampleCount"], 10);
    assert!(j["meanVariance"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    assert_eq!(pie(&["eval", "--task", "sample", "--out", o]).status.code(), Some(2));
    assert_eq!(pie(&["eval", "--task", "dance", "--out", o]).status.code(), Some(2));
    let bad = dir.path().join("ck.json");
    std::fs::write(&bad, r#"{"formatVersion":42}"#).unwrap();
    let out = pie(&["eval", "--checkpoint", s(&bad), "--task", "sample", "--out", o]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn two_dimensional_eval_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let run = dir.path().join("run");
    assert_eq!(pie(&["train", "--config", s(&cfg), "--data", "synthetic:ring:300", "--out", s(&run)]).status.code(), Some(0));
    let ck = run.join("checkpoint-00000012.json");
    let o = dir.path().join("rec");
    let out = pie(&["eval", "--checkpoint", s(&ck), "--task", "reconstruct", "--data", "synthetic:ring:300", "--count", "5", "--out", s(&o)]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(o.join("reconstruct.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("x0,x1,rx0,rx1"));
    assert_eq!(text.lines().count(), 6);
}
