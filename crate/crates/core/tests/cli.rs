use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SHORT_CUSTOM: &str = r#"
scenario = "custom"
loss_grid = [40.0, 55.0]
[montecarlo]
duration = 0.02
target_events = 50
max_duration = 1.0
"#;

fn wmqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmqkd")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn error_json(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("stderr carries an error record");
    serde_json::from_str(last).expect("error record is JSON")
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn seeded_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SHORT_CUSTOM);
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let out = wmqkd(&["custom", "--config", &cfg, "--seed", "42", "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let rec: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(rec["status"], "ok");
    }
    let (a, b) = (files_in(&dirs[0]), files_in(&dirs[1]));
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);

    let c = tmp.path().join("c");
    let out = wmqkd(&["custom", "--config", &cfg, "--seed", "43", "--out", c.to_str().unwrap()]);
    assert!(out.status.success());
    assert_ne!(files_in(&c), a);
}

#[test]
fn outputs_embed_resolved_config_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SHORT_CUSTOM);
    let out_dir = tmp.path().join("o");
    let out = wmqkd(&["custom", "--config", &cfg, "--seed", "9", "--mode", "analytic", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let json: Value = serde_json::from_slice(&std::fs::read(out_dir.join("custom.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 9);
    assert_eq!(json["config"]["seed"], 9);
    assert_eq!(json["config"]["mode"], "analytic");
    assert_eq!(json["config"]["loss_grid"], serde_json::json!([40.0, 55.0]));
    // Defaults that the file did not mention are resolved too.
    assert!(json["config"]["detectors"]["alice"]["dead_time"].is_number());
    let csv = std::fs::read_to_string(out_dir.join("custom.csv")).unwrap();
    assert!(csv.lines().take_while(|l| l.starts_with('#')).any(|l| l.contains("\"seed\":9")));
}

#[test]
fn invalid_value_yields_error_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "scenario = \"custom\"\nloss_grid = [-3.0]\n");
    let out = wmqkd(&["custom", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    let rec = error_json(&out);
    assert_eq!(rec["status"], "error");
    assert_eq!(rec["kind"], "invalid_parameter");
    assert_eq!(rec["field"], "loss_grid");
}

#[test]
fn unknown_key_and_missing_file_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "scenario = \"custom\"\nloss_grd = [3.0]\n");
    let out = wmqkd(&["custom", "--config", &cfg]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["kind"], "config_parse");

    let out = wmqkd(&["fig3b", "--config", tmp.path().join("absent.toml").to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["kind"], "io");
}

#[test]
fn bad_arguments_yield_usage_record() {
    for args in [&["fig9"][..], &["custom", "--mode", "sideways"], &["fig3d", "--seed", "x"]] {
        let out = wmqkd(args);
        assert!(!out.status.success(), "{args:?}");
        assert_eq!(error_json(&out)["kind"], "usage", "{args:?}");
    }
    assert!(wmqkd(&["--help"]).status.success());
}
