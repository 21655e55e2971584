use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn hoigen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoigen"))
        .args(args)
        .env("HOIGEN_THREADS", "2")
        .output()
        .expect("spawn hoigen")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn small_generator() -> Value {
    json!({
        "max_train_per_composition": 40,
        "val_per_composition": 3,
        "unlabeled_per_composition": 4,
        "test_per_composition": 6,
        "seed": 5
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let p = dir.join("exp.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn small_experiment() -> Value {
    json!({
        "generator": small_generator(),
        "epochs": 4,
        "classifier_epochs": 4,
        "synth_epochs": 2,
        "seed": 1
    })
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_experiment());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = hoigen(&["pipeline", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn compare_report_has_two_mpd_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_experiment());
    let out = dir.path().join("r.json");
    let o = hoigen(&["pipeline", "--config", &cfg, "--compare", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    let names: Vec<&str> = runs.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["main", "baseline"]);
    for r in runs {
        assert!(r["default"]["mpd"]["mpd"].is_number(), "{r}");
    }
    assert_eq!(runs[1]["toggles"]["oil"], json!(false));
}

#[test]
fn flags_override_config_file_and_all_off_is_plain_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_experiment());
    let out = dir.path().join("r.json");
    let o = hoigen(&[
        "pipeline", "--config", &cfg, "--seed", "9", "--oil", "false", "--uqm", "false", "--cui",
        "false", "--extra-data", "false", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], json!(9));
    assert_eq!(report["config"]["epochs"], json!(4));
    let run = &report["runs"][0];
    for t in ["oil", "uqm", "cui", "extra_data"] {
        assert_eq!(run["toggles"][t], json!(false));
    }
    assert_eq!(run["pseudo_labels"], json!({}));
    let f = run["calibration"]["fusion"]["human"].as_f64().unwrap();
    assert!((f - 1.0 / 3.0).abs() < 1e-6, "{f}");
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let m = missing.to_str().unwrap();
    let out = dir.path().join("r.json");
    let o = hoigen(&["eval", "--gt", m, "--det", m, "--vocab", m, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let bad = write_config(dir.path(), &json!({"toggles": {"uqm": false, "extra_data": true}}));
    let o = hoigen(&["pipeline", "--config", &bad, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));

    let o = hoigen(&["pipeline", "--bogus"]);
    assert_eq!(code(&o), 1);

    let data = dir.path().join("data");
    let o = hoigen(&["gen", "--out-dir", data.to_str().unwrap(), "--seed", "2"]);
    assert_eq!(code(&o), 0);
    let o = hoigen(&[
        "train", "--data", data.to_str().unwrap(), "--stream", "human", "--no-uqm", "--lr", "1e12",
        "--clip-norm", "0", "--epochs", "3", "--out", dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stepwise_commands_produce_an_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    fs::write(p("gen.json"), small_generator().to_string()).unwrap();
    let data = p("data");
    let o = hoigen(&["gen", "--config", &p("gen.json"), "--out-dir", &data]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let df = |f: &str| format!("{data}/{f}");

    let o = hoigen(&[
        "synth", "--features", &df("features_object.jsonl"), "--vocab", &df("vocab.json"),
        "--pairs", &df("pairs.jsonl"), "--splits", &df("splits.jsonl"), "--classifier-epochs", "3",
        "--synth-epochs", "2", "--out", &p("synth.ckpt"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    for stream in ["human", "object", "spatial"] {
        let ckpt = p(&format!("{stream}.ckpt"));
        let scores = p(&format!("{stream}.scores.jsonl"));
        let mut args = vec![
            "train", "--data", &data, "--stream", stream, "--epochs", "3", "--out", &ckpt,
            "--scores-out", &scores,
        ];
        let synth = p("synth.ckpt");
        if stream == "object" {
            args.extend(["--synth", synth.as_str(), "--extra-data"]);
        }
        let o = hoigen(&args);
        assert_eq!(code(&o), 0, "{stream}: {}", String::from_utf8_lossy(&o.stderr));
    }

    let o = hoigen(&["pseudo", "--data", &data, "--model", &p("human.ckpt"), "--out", &p("v.jsonl")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let verdicts = fs::read_to_string(p("v.jsonl")).unwrap();
    let first: Value = serde_json::from_str(verdicts.lines().next().unwrap()).unwrap();
    for key in ["pair_id", "verb", "verdict", "sigma_s", "var", "loss"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let o = hoigen(&[
        "calibrate", "--val-scores", &p("human.scores.jsonl"), "--val-scores",
        &p("object.scores.jsonl"), "--val-scores", &p("spatial.scores.jsonl"), "--labels",
        &df("labels.jsonl"), "--out", &p("calib.json"), "--det-out", &p("det.jsonl"), "--pairs",
        &df("pairs.jsonl"), "--vocab", &df("vocab.json"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let calib: Value = serde_json::from_str(&fs::read_to_string(p("calib.json")).unwrap()).unwrap();
    let f = &calib["fusion"];
    let sum: f64 = ["human", "object", "spatial"].iter().map(|k| f[k].as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);

    for mode in ["default", "known"] {
        let out = p(&format!("eval_{mode}.json"));
        let o = hoigen(&[
            "eval", "--gt", &df("gt.jsonl"), "--det", &p("det.jsonl"), "--vocab", &df("vocab.json"),
            "--mode", mode, "--iou", "0.5", "--out", &out,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let r: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        let full = r["metrics"]["map"]["full"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&full));
    }
}
