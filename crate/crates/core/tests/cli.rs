mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use stopwise::harness::cli::run;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("stopwise").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_data(dir: &Path, n: usize, seed: u64) -> String {
    let path = dir.join(format!("data{seed}.csv"));
    fs::write(&path, common::synthetic_csv(n, seed)).unwrap();
    path.display().to_string()
}

#[test]
fn help_and_version_succeed() {
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train") && out.contains("predict"));
    assert_eq!(call(&["--version"]).0, 0);
    assert_eq!(call(&["train", "--help"]).0, 0);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(call(&[]).0, 1);
    assert_eq!(call(&["frobnicate"]).0, 1);
    assert_eq!(call(&["train", "--data", "x.csv"]).0, 1);
    assert_eq!(call(&["train", "--data", "x.csv", "--out", "m.json", "--structure", "star"]).0, 1);
    assert_eq!(call(&["evaluate", "--data", "x.csv", "--beta", "lots"]).0, 1);
}

#[test]
fn data_and_model_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv").display().to_string();
    let out = dir.path().join("m.json").display().to_string();
    let (code, _, err) = call(&["train", "--data", &missing, "--out", &out]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"format_version\": 999}").unwrap();
    let data = write_data(dir.path(), 50, 1);
    let (code, _, err) = call(&["predict", "--model", bad.to_str().unwrap(), "--data", &data]);
    assert_eq!(code, 2);
    assert!(err.contains("999"));

    assert_eq!(call(&["train", "--data", &data, "--out", &out, "--cost-e=-1"]).0, 2);
    assert_eq!(call(&["train", "--data", &data, "--out", &out, "--format", "xml"]).0, 2);
}

#[test]
fn train_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300, 2);
    let model = dir.path().join("model.json").display().to_string();
    let (code, out, err) = call(&["train", "--data", &data, "--out", &model, "--cost-e", "0.002", "--bins", "5"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("horizon"));

    let (code, out, _) = call(&["predict", "--model", &model, "--data", &data]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 300);
    for (i, line) in lines.iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0], i.to_string());
        assert!(cols[1] == "pos" || cols[1] == "neg");
        cols[2].parse::<usize>().unwrap();
    }

    let (code, traced, _) = call(&["predict", "--model", &model, "--data", &data, "--trace"]);
    assert_eq!(code, 0);
    assert_eq!(traced.lines().count(), 300);

    let saved = dir.path().join("pred.tsv");
    let (code, _, _) = call(&["predict", "--model", &model, "--data", &data, "--out", saved.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(saved).unwrap(), out);
}

#[test]
fn evaluate_reports_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300, 3);
    let report = dir.path().join("report.json");
    let (code, out, err) = call(&["evaluate", "--data", &data, "--folds", "3", "--out", report.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.lines().any(|l| l.starts_with("accuracy\t")));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["folds"].as_array().unwrap().len(), 3);
    assert_eq!(json["n_test"], 300);
}

#[test]
fn cost_files_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200, 4);
    let q = dir.path().join("q.txt");
    fs::write(&q, "0 2\n1 0\n").unwrap();
    let e = dir.path().join("e.csv");
    fs::write(&e, "feature,cost\na,0.5\nc,0.001\n").unwrap();
    let model = dir.path().join("m.json").display().to_string();
    let args = ["train", "--data", &data, "--out", &model, "--cost-q", q.to_str().unwrap(), "--cost-e", e.to_str().unwrap()];
    let (code, _, err) = call(&args);
    assert_eq!(code, 0, "{err}");

    fs::write(&q, "0 2 1\n1 0 1\n").unwrap();
    assert_eq!(call(&args).0, 2);
}

#[test]
fn oracle_check_passes() {
    let (code, out, err) = call(&["oracle-check", "--cases", "30", "--seed", "4"]);
    assert_eq!(code, 0, "{err}");
    assert!(!out.is_empty());
}

#[test]
fn experiment_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 200, 5);
    let spec = dir.path().join("sweep.toml");
    fs::write(&spec, "kind = \"bin-sweep\"\ndatasets = [\"data5.csv\"]\nfolds = 2\n[grid]\nbins = [2, 4]\n").unwrap();
    let results = dir.path().join("results.csv");
    let (code, _, err) = call(&["experiment", "--spec", spec.to_str().unwrap(), "--out", results.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(results).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);

    fs::write(&spec, "kind = \"bin-sweep\"\ndatasets = [\"data5.csv\"]\n").unwrap();
    let (code, _, _) = call(&["experiment", "--spec", spec.to_str().unwrap(), "--out", "unused.csv"]);
    assert_eq!(code, 2);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_stopwise");
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).arg("nope").output().unwrap().status.code(), Some(1));
    let status = Command::new(bin)
        .args(["predict", "--model", "/nonexistent/model.json", "--data", "/nonexistent/data.csv"])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}
