use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_countloss"))
}

fn count(input: &str, args: &[&str]) -> Output {
    let mut child = bin()
        .arg("count")
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn column(out: &Output, col: usize) -> Vec<String> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(col).unwrap().to_string())
        .collect()
}

#[test]
fn count_all() {
    let out = count("0.1 0.2 0.3", &["--all"]);
    assert!(out.status.success());
    assert_eq!(column(&out, 2), ["0.504", "0.398", "0.092", "0.006"]);
    assert_eq!(column(&count("0.1,0.2,0.3\n", &[]), 2), column(&out, 2));
}

#[test]
fn count_single_and_interval() {
    assert_eq!(column(&count("0.5", &["--s", "1"]), 2), ["0.5"]);
    let out = count("0.1 0.2 0.3", &["--interval", "1", "3"]);
    assert_eq!(column(&out, 0), ["1..3"]);
    assert_eq!(column(&out, 2), ["0.496"]);
}

#[test]
fn count_rejects_bad_input_with_usage_code() {
    for (input, args) in [
        ("0.1 1.5", vec![]),
        ("0 0.5", vec![]),
        ("abc", vec![]),
        ("", vec![]),
        ("0.5", vec!["--s", "2"]),
        ("0.5", vec!["--s", "1", "--all"]),
    ] {
        let out = count(input, &args);
        assert_eq!(out.status.code(), Some(2), "{input:?} {args:?}");
    }
}

#[test]
fn verify_passes() {
    let out = bin()
        .args(["verify", "200", "12", "1e-9"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let out = bin().args(["verify", "10", "40", "1e-9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn simulate_train_evaluate_mil() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("sim.toml"),
        "schema_version = 1\nseed = 3\n[data]\nsource = \"gaussian\"\nn = 600\ndim = 2\nseparation = 4.0\ntest_n = 400\n[mil]\nsize_mean = 10.0\nsize_std = 2.0\ncount = 50\n",
    );
    let sim = d.join("sim");
    run(&[
        "simulate",
        "--config",
        d.join("sim.toml").to_str().unwrap(),
        "--out",
        sim.to_str().unwrap(),
    ]);
    let bags = std::fs::read_to_string(sim.join("bags.jsonl")).unwrap();
    assert_eq!(bags.lines().count(), 50);
    assert_eq!(bags.matches("\"max_label\":true").count(), 25);

    // same seed, same bytes
    let sim2 = d.join("sim2");
    run(&[
        "simulate",
        "--config",
        d.join("sim.toml").to_str().unwrap(),
        "--out",
        sim2.to_str().unwrap(),
    ]);
    for f in ["instances.csv", "test_instances.csv", "bags.jsonl"] {
        assert_eq!(
            std::fs::read(sim.join(f)).unwrap(),
            std::fs::read(sim2.join(f)).unwrap(),
            "{f}"
        );
    }

    write(
        &d.join("train.toml"),
        "schema_version = 1\n[input]\ninstances = \"sim/instances.csv\"\nbags = \"sim/bags.jsonl\"\n[train]\nsetting = \"mil\"\nepochs = 20\nhidden = [16]\n[output]\ndir = \"run\"\n",
    );
    let out = run(&["train", "--config", d.join("train.toml").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("best epoch: 20"));
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 21);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 3);

    run(&[
        "train",
        "--config",
        d.join("train.toml").to_str().unwrap(),
        "--out",
        d.join("run2").to_str().unwrap(),
    ]);
    for f in ["checkpoint.json", "metrics.jsonl"] {
        assert_eq!(
            std::fs::read(d.join("run").join(f)).unwrap(),
            std::fs::read(d.join("run2").join(f)).unwrap(),
            "{f}"
        );
    }

    let report = d.join("eval.json");
    let out = run(&[
        "evaluate",
        "--checkpoint",
        d.join("run/checkpoint.json").to_str().unwrap(),
        "--data",
        sim.join("test_instances.csv").to_str().unwrap(),
        "--json",
        report.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("instances (400)"));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert!(v["instance"]["auc"].as_f64().unwrap() > 0.9);
}

#[test]
fn train_with_zero_epochs_checkpoints_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("sim.toml"),
        "schema_version = 1\n[data]\nsource = \"gaussian\"\nn = 200\ndim = 2\nseparation = 2.0\n[pu]\nalpha = 0.5\nc = 0.5\n",
    );
    run(&[
        "simulate",
        "--config",
        d.join("sim.toml").to_str().unwrap(),
        "--out",
        d.join("sim").to_str().unwrap(),
    ]);
    assert!(d.join("sim/pu_split.json").exists());
    write(
        &d.join("train.toml"),
        "schema_version = 1\n[input]\ninstances = \"sim/instances.csv\"\npu_split = \"sim/pu_split.json\"\n[train]\nsetting = \"pu_kl\"\nk_u = 20\nhidden = [4]\n[output]\ndir = \"run\"\n",
    );
    let out = run(&[
        "train",
        "--config",
        d.join("train.toml").to_str().unwrap(),
        "--epochs",
        "0",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("best epoch: 0"));
    assert!(d.join("run/checkpoint.json").exists());
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("bad.toml"),
        "schema_version = 1\n[input]\ninstances = \"x.csv\"\n[train]\nsetting = \"llp\"\nlearning_rat = 0.1\n[output]\ndir = \"run\"\n",
    );
    let out = bin()
        .args(["train", "--config", d.join("bad.toml").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = bin()
        .args([
            "train",
            "--config",
            d.join("missing.toml").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
