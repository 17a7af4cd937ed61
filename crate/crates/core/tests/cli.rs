use std::path::Path;
use std::process::{Command, Output};

use eprobust::bench::records::load_results;

const CONFIG: &str = "input_shape = 1,8,8\nconv_channels = 4,8\nclasses = 2\nepochs = 2\nseed = 5\nsynth_train = 128\nsynth_test = 64\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eprobust"))
        .args(args)
        .current_dir(dir)
        .env("EPROBUST_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn trained(kind: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    ok(dir.path(), &["train", "--model", kind, "--config", "run.cfg", "--val", "synth", "--out", "m.ckpt"]);
    dir
}

#[test]
fn unknown_config_key_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "classes = 2\nlearning_rate = 0.1\n").unwrap();
    let out = run(dir.path(), &["train", "--model", "bp", "--config", "bad.cfg", "--out", "m.ckpt"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("learning_rate"), "{err}");
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn thread_variable_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_eprobust"))
        .args(["report", "--in", "x.csv"])
        .current_dir(dir.path())
        .env("EPROBUST_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("EPROBUST_THREADS"));
}

#[test]
fn eval_subset_and_corrupt() {
    let dir = trained("bp");
    let d = dir.path();
    ok(d, &["eval", "--ckpt", "m.ckpt", "--subset", "10", "--out", "eval.json"]);
    let rows = load_results(&d.join("eval.json")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].attack.as_str(), rows[0].n, rows[0].model.as_str()), ("clean", 10, "m"));

    ok(d, &["corrupt", "--ckpt", "m.ckpt", "--kinds", "contrast,gaussian_noise", "--severities", "1,5", "--subset", "16", "--out", "c.csv"]);
    let rows = load_results(&d.join("c.csv")).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows[1..].iter().all(|r| r.severity.is_some() && (0.0..=1.0).contains(&r.accuracy)));
    let out = ok(d, &["report", "--in", "c.csv"]);
    assert!(out.contains("contrast"));
    // Corruption rows are not attack cells.
    assert!(!run(d, &["report", "--in", "c.csv", "--mean-robustness"]).status.success());
}

#[test]
fn ep_attack_and_uncertainty() {
    let dir = trained("ep");
    let d = dir.path();
    let out = ok(d, &["attack", "--ckpt", "m.ckpt", "--family", "pgd", "--eps", "0.05", "--steps", "5", "--subset", "8", "--out", "a.csv"]);
    assert!(out.contains("attacking free-phase step"));
    let rows = load_results(&d.join("a.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.attack.as_str()).collect::<Vec<_>>(), ["clean", "pgd"]);
    assert!(rows[1].accuracy <= rows[0].accuracy);

    ok(d, &["uncertainty", "--ckpt", "m.ckpt", "--eps-grid", "0.5,1,2,4", "--samples", "10", "--bootstrap", "20", "--subset", "8", "--out", "u.json"]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("u.json")).unwrap()).unwrap();
    assert_eq!(doc["rates"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--ckpt", "nope.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}
