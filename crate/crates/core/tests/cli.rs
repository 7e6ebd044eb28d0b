use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpms::cli::{Experiment, RunConfig};

fn dpms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpms"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dpms(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Linear config with a short schedule, written to `dir/config.json`.
fn linear_config(dir: &Path, epochs: usize) -> PathBuf {
    let mut cfg = RunConfig::new(Experiment::LinearOneSample);
    cfg.linear.instances = 4;
    cfg.linear.fit.train.epochs = epochs;
    cfg.linear.fit.train.checkpoint_every = 20;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn generate_is_byte_identical_and_has_twenty_brains() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["generate", "--experiment", "sim-brain", "--seed", "5", "--out", s(dir)]);
    }
    assert_eq!(files(&a), files(&b));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["instances"].as_array().unwrap().len(), 20);
    let dirs = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 20);
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, r#"{"schema_version": 1, "experiment": "linear-one-sample", "learning_rat": 0.1}"#).unwrap();
    let out = dpms(&["generate", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn fit_eval_isolated_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = linear_config(root, 100);
    let data = root.join("data");
    ok(&["generate", "--config", s(&cfg), "--seed", "2", "--out", s(&data)]);

    // synthesis, evaluated twice
    let fit = root.join("fit");
    ok(&["fit", "--config", s(&cfg), "--data", s(&data), "--out", s(&fit)]);
    let (e1, e2) = (root.join("eval1"), root.join("eval2"));
    for e in [&e1, &e2] {
        ok(&["eval", "--checkpoint", s(&fit), "--data", s(&data), "--splits", "train", "--out", s(e)]);
    }
    assert_eq!(fs::read(e1.join("metrics.json")).unwrap(), fs::read(e2.join("metrics.json")).unwrap());
    // long format: header plus ELBO and normalized ELBO per instance
    let csv = fs::read_to_string(e1.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);

    // one instance on its own
    let iso = root.join("iso");
    ok(&["fit", "--config", s(&cfg), "--data", s(&data), "--mode", "isolated", "--instance", "2", "--out", s(&iso)]);
    let e3 = root.join("eval3");
    ok(&["eval", "--checkpoint", s(&iso), "--data", s(&data), "--splits", "train", "--out", s(&e3)]);
    let csv = fs::read_to_string(e3.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("system002,")));

    // interrupt after epoch 40 and resume: same result as the straight run
    let resumed = root.join("resumed");
    ok(&["fit", "--config", s(&cfg), "--data", s(&data), "--out", s(&resumed)]);
    for entry in fs::read_dir(resumed.join("checkpoints")).unwrap() {
        let path = entry.unwrap().path();
        let epoch: usize = path.file_name().unwrap().to_str().unwrap().trim_start_matches("epoch-").parse().unwrap();
        if epoch > 40 {
            fs::remove_dir_all(path).unwrap();
        }
    }
    fs::remove_dir_all(resumed.join("final")).unwrap();
    fs::remove_file(resumed.join("run.json")).unwrap();
    ok(&["fit", "--config", s(&cfg), "--data", s(&data), "--out", s(&resumed), "--resume"]);
    assert_eq!(files(&fit.join("final")), files(&resumed.join("final")));
    assert_eq!(fs::read_to_string(fit.join("run.json")).unwrap(), fs::read_to_string(resumed.join("run.json")).unwrap());
}

#[test]
fn isolated_without_instance_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dpms(&["fit", "--data", s(tmp.path()), "--mode", "isolated", "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
}
