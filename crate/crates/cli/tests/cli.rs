use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqsuite")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

#[test]
fn gen_writes_configured_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["gen", "--config", s(&demo("gen.json")), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let train = std::fs::read_to_string(a.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 4096);
    assert_eq!(train, std::fs::read_to_string(b.join("train.jsonl")).unwrap());
    assert_eq!(
        std::fs::read_to_string(a.join("shift_sweep.jsonl")).unwrap().lines().count(),
        800
    );
}

#[test]
fn gen_rejects_bad_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(demo("gen.json")).unwrap()).unwrap();
    cfg["generators"]["canon"]["noise"] = json!({"kind": "affine", "intercept": -1.0, "slope": 0.2});
    let p = write_json(dir.path(), "gen.json", &cfg);
    let o = run(&["gen", "--config", s(&p), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("noise"));

    cfg["generators"]["canon"]["noise"] = json!({"kind": "laplace"});
    let p = write_json(dir.path(), "gen2.json", &cfg);
    assert_eq!(code(&run(&["gen", "--config", s(&p), "--out", s(dir.path())])), 3);
}

#[test]
fn missing_inputs_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    assert_eq!(code(&run(&["run", "--config", "/nonexistent/suite.json", "--report", s(&report)])), 3);

    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(demo("suite.json")).unwrap()).unwrap();
    cfg["data"]["edge_review"]["path"] = json!("no_such_file.jsonl");
    let p = write_json(dir.path(), "suite.json", &cfg);
    let o = run(&["run", "--config", s(&p), "--report", s(&report)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!report.exists());
}

#[test]
fn execution_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "suite_id": "diverge",
        "generators": {"canon": {"mean": {"kind": "sin"}, "noise": {"kind": "constant", "value": 0.1},
                       "sampler": {"kind": "uniform", "low": [-3], "high": [3]}}},
        "data": {"id": {"kind": "full_odd", "generator": "canon", "n": 64}},
        "estimator": {"kind": "parametric", "model": {"train": {
            "spec": {"widths": [1, 8, 1], "head": "gaussian"}, "data": "id",
            "config": {"learning_rate": 1e12, "epochs": 50, "batch_size": 8, "loss": "gaussian_nll", "optimizer": "sgd"}}}},
        "criteria": [{"id": "nll", "category": "calibration", "data": "id",
                      "measure": {"metric": "nll_mean"}, "comparator": "le", "threshold": 1.0}]
    });
    let p = write_json(dir.path(), "suite.json", &cfg);
    let o = run(&["run", "--config", s(&p), "--report", s(&dir.path().join("r.json"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn render_and_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let md = dir.path().join("r.md");
    let o = run(&["run", "--config", s(&demo("suite.json")), "--report", s(&report), "--md", s(&md), "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let ids: Vec<&str> = r["results"].as_array().unwrap().iter().map(|t| t["id"].as_str().unwrap()).collect();
    let o = run(&["render", "--report", s(&report)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows = text.lines().filter(|l| ids.iter().any(|id| l.starts_with(&format!("| {id} |")))).count();
    assert_eq!(rows, ids.len());
    assert!(text.contains("## Conflicting results"));
    assert!(o.stderr.is_empty());
    assert_eq!(text, std::fs::read_to_string(&md).unwrap());

    let mut tampered = r.clone();
    let t = tampered["results"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .find(|t| t["id"] == "nll_id@global")
        .unwrap();
    t["verdict"] = json!("fail");
    let p = write_json(dir.path(), "tampered.json", &tampered);
    let o = run(&["render", "--report", s(&p)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("integrity warning"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("WARNING"));

    let mut old = r;
    old["schema_version"] = json!(0);
    let p = write_json(dir.path(), "old.json", &old);
    assert_eq!(code(&run(&["render", "--report", s(&p)])), 3);
}

#[test]
fn search_on_toy_estimator_finds_the_peak() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hits.json");
    let o = run(&["search", "--config", s(&demo("search_toy.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let hits = v["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 10);
    assert!((hits[0]["x"][0].as_f64().unwrap() - 2.0).abs() < 0.05);
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn train_writes_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(demo("train.json")).unwrap()).unwrap();
    cfg["train"]["epochs"] = json!(5);
    cfg["members"] = json!(3);
    let p = write_json(dir.path(), "train.json", &cfg);
    let o = run(&["train", "--config", s(&p), "--out", s(&dir.path().join("member.json"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..3 {
        uqsuite::nn::Mlp::load(dir.path().join(format!("member_{i}.json"))).unwrap();
    }
}

#[test]
fn versioned_schema_matches_code() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join(format!("../../schemas/report.v{}.schema.json", uqsuite::report::SCHEMA_VERSION));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(schema["properties"]["schema_version"]["const"], json!(uqsuite::report::SCHEMA_VERSION));
}
