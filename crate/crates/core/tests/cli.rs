use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn chunklens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunklens"))
        .args(args)
        .env("CHUNKLENS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = chunklens(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("run-manifest.json")).unwrap()).unwrap()
}

fn sha(p: &Path) -> String {
    Sha256::digest(fs::read(p).unwrap())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(chunklens(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(chunklens(&["synth", "--kind", "bogus"]).status.code(), Some(2));
    assert_eq!(chunklens(&["eval-pa"]).status.code(), Some(2));
    assert_eq!(chunklens(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_three_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.actr");
    let out = chunklens(&["--trace", s(&missing), "--out", s(dir.path()), "extract-dsc"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.actr"));
}

#[test]
fn corrupt_trace_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.actr");
    fs::write(&bad, b"ACTR\x01\0\0\0garbage").unwrap();
    let out = chunklens(&["--trace", s(&bad), "--out", s(dir.path()), "train-ucd"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn failed_checks_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let recipes = dir.path().join("extra.toml");
    fs::write(
        &recipes,
        "[recipe.impossible]\nkind = \"pa-synthetic\"\ndescription = \"unreachable TPR\"\n[recipe.impossible.checks]\nmin_tpr = 1.5\n",
    )
    .unwrap();
    let out = chunklens(&["--out", s(dir.path()), "replicate", "impossible", "--recipes", s(&recipes)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL min_tpr"));

    fs::write(&recipes, "[recipe.bad]\nkind = \"pa-synthetic\"\n[recipe.bad.checks]\nmin_nonsense = 1\n").unwrap();
    let out = chunklens(&["--out", s(dir.path()), "replicate", "bad", "--recipes", s(&recipes)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn replicate_lists_builtin_recipes() {
    let out = ok(&["replicate", "--list"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["rnn-lookup", "rnn-pa-align", "rnn-graft", "pa-synthetic", "ucd-synthetic"] {
        assert!(text.contains(name), "{name} missing from {text}");
    }
}

#[test]
fn replicate_is_deterministic_and_manifested() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = ok(&["--seed", "3", "--out", s(d.path()), "replicate", "pa-synthetic"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    }
    let (ca, cb) = (csv_files(a.path()), csv_files(b.path()));
    assert!(!ca.is_empty());
    for (x, y) in ca.iter().zip(&cb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{x:?} differs");
    }

    let m = manifest(a.path());
    assert_eq!(m["command"], "replicate");
    assert_eq!(m["seed"], 3);
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        let p = a.path().join(o["path"].as_str().unwrap());
        assert_eq!(o["sha256"].as_str().unwrap(), sha(&p), "{p:?}");
    }
}

#[test]
fn rnn_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "--out", s(d), "train-rnn", "--kind", "noise", "--length", "3000", "--iterations", "1500",
    ]);
    for f in ["model.json", "losses.csv", "sequence.txt", "sequence.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    ok(&[
        "--out", s(d), "export-trace", "--model", s(&d.join("model.json")),
        "--sequence", s(&d.join("sequence.txt")), "--sidecar", s(&d.join("sequence.json")),
    ]);
    let trace = d.join("trace.actr");
    let t = chunklens::trace::read_trace(&trace).unwrap();
    assert!(t.annotation("ABCD").is_some_and(|a| !a.indices.is_empty()));

    ok(&["--trace", s(&trace), "--out", s(d), "extract-dsc"]);
    let metrics: Value = serde_json::from_slice(&fs::read(d.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.is_object());

    ok(&["--trace", s(&trace), "--out", s(d), "fit-pa", "--test-trace", s(&trace), "--concept", "ABCD", "--shifts", "-1", "0"]);
    assert!(d.join("layer_stats.csv").exists());
    ok(&["--out", s(d), "eval-pa", "--chunk", s(&d.join("chunk.json")), "--test-trace", s(&trace)]);
    let eval = fs::read_to_string(d.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 2, "{eval}");

    ok(&["--out", s(d), "export-graft-spec", "--chunk", s(&d.join("chunk.json")), "--position", "all"]);
    let spec = chunklens::intervene::load_specs(d.join("graft_spec.json")).unwrap();
    assert_eq!(spec[0].concept, "ABCD");

    ok(&["--trace", s(&trace), "--out", s(d), "train-ucd", "--K", "4", "--epochs", "2"]);
    ok(&["--trace", s(&trace), "--out", s(d), "assign-ucd", "--dict", s(&d.join("dictionary.ucd"))]);
    let assignments = fs::read_to_string(d.join("assignments.csv")).unwrap();
    assert_eq!(assignments.lines().count(), t.token_count() + 1);

    let report = d.join("report");
    ok(&["--out", s(&report), "report", "--from", s(d)]);
    assert!(fs::read_dir(&report).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));

    assert_eq!(manifest(&report)["command"], "report");
    assert_eq!(manifest(d)["command"], "assign-ucd");
}

#[test]
fn graft_spec_run_on_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["--out", s(d), "train-rnn", "--kind", "periodic", "--pattern", "ABCD", "--repetitions", "100", "--iterations", "300"]);
    let spec = d.join("spec.json");
    fs::write(
        &spec,
        r#"{"mode": "freeze", "layers": [0], "support": [0, 1], "values": [0.0, 0.0], "position": 2, "concept": "x"}"#,
    )
    .unwrap();
    ok(&["--out", s(d), "graft-rnn", "--model", s(&d.join("model.json")), "--spec", s(&spec), "--input", "ABCDAB"]);
    let csv = fs::read_to_string(d.join("graft.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}
