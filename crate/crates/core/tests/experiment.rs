mod common;

use std::fs;

use stopwise::harness::experiment::{result_header, TIMING_COLUMNS};
use stopwise::harness::{read_results, run_experiment, write_results, ExperimentSpec, ResultRow};

fn setup(spec: &str) -> (tempfile::TempDir, ExperimentSpec) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("one.csv"), common::synthetic_csv(240, 11)).unwrap();
    fs::write(dir.path().join("two.csv"), common::synthetic_csv(180, 12)).unwrap();
    (dir, ExperimentSpec::from_toml(spec).unwrap())
}

fn without_timing(rows: &[ResultRow]) -> Vec<ResultRow> {
    rows.iter()
        .cloned()
        .map(|r| ResultRow {
            preprocess_s: None,
            train_s: None,
            inference_s: None,
            total_s: None,
            ..r
        })
        .collect()
}

const COST_SWEEP: &str = r#"
kind = "cost-sweep"
datasets = ["one.csv", "two.csv"]
folds = 3
seed = 9
[base]
bins = 5
[grid]
cost_e = [0.1, 0.01, 0.001]
"#;

#[test]
fn rows_cover_the_grid_in_order() {
    let (dir, spec) = setup(COST_SWEEP);
    let rows = run_experiment(&spec, dir.path()).unwrap();
    assert_eq!(rows.len(), spec.row_count());
    assert_eq!(rows.len(), 2 * 3 * 3);
    assert!(rows.iter().all(|r| r.error.is_none() && r.accuracy.is_some()));
    assert_eq!(rows[0].dataset, "one");
    assert_eq!(rows[17].dataset, "two");
    let firsts: Vec<f64> = rows.iter().step_by(3).take(3).map(|r| r.cost_e).collect();
    assert_eq!(firsts, [0.1, 0.01, 0.001]);
    assert!(rows.iter().all(|r| r.bins == 5 && r.seed == 9 && r.kind == "cost-sweep"));
}

#[test]
fn reruns_match_apart_from_timing() {
    let (dir, spec) = setup(COST_SWEEP);
    let a = run_experiment(&spec, dir.path()).unwrap();
    let b = run_experiment(&spec, dir.path()).unwrap();
    assert_eq!(without_timing(&a), without_timing(&b));
}

#[test]
fn csv_round_trip() {
    let (dir, spec) = setup(COST_SWEEP);
    let rows = run_experiment(&spec, dir.path()).unwrap();
    let mut buf = Vec::new();
    write_results(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), result_header().join(","));
    assert!(TIMING_COLUMNS.iter().all(|c| result_header().contains(c)));
    assert_eq!(read_results(buf.as_slice()).unwrap(), rows);
    assert!(read_results("a,b\n1,2\n".as_bytes()).is_err());
}

#[test]
fn failed_points_become_row_errors() {
    let (dir, spec) = setup(
        r#"
kind = "bin-sweep"
datasets = ["one.csv"]
holdout = 0.25
[grid]
bins = [0, 3]
"#,
    );
    let rows = run_experiment(&spec, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].error.is_some() && rows[0].accuracy.is_none());
    assert!(rows[1].error.is_none());
    assert_eq!(rows[1].n_test, Some(60));
}

#[test]
fn unreadable_dataset_aborts() {
    let (dir, _) = setup(COST_SWEEP);
    let spec = ExperimentSpec::from_toml("kind = \"single\"\ndatasets = [\"absent.csv\"]\n").unwrap();
    assert!(run_experiment(&spec, dir.path()).is_err());
}

#[test]
fn structure_and_missing_grids() {
    let (dir, spec) = setup(
        r#"
kind = "structure-compare"
datasets = ["one.csv"]
folds = 2
[grid]
structure = ["tree", "line", "random", "clique"]
"#,
    );
    let rows = run_experiment(&spec, dir.path()).unwrap();
    let kinds: Vec<&str> = rows.iter().step_by(2).map(|r| r.structure.as_str()).collect();
    assert_eq!(kinds, ["tree", "line", "random", "clique"]);
    assert!(rows[6..].iter().all(|r| r.horizon == Some(1)));

    let (dir, spec) = setup(
        r#"
kind = "missing-robustness"
datasets = ["two.csv"]
folds = 2
[grid]
missing_pct = [0.0, 20.0]
"#,
    );
    let rows = run_experiment(&spec, dir.path()).unwrap();
    assert_eq!(rows.iter().map(|r| r.missing_pct).collect::<Vec<_>>(), [0.0, 0.0, 20.0, 20.0]);
}
