mod common;

use stopwise::harness::persist::{from_str, to_string};
use stopwise::harness::{load_model, save_model, train, HarnessError, TrainConfig};
use stopwise::runtime::{Decision, PolicyModel};
use stopwise::structure::StructureKind;

fn trained(kind: StructureKind) -> PolicyModel {
    let cfg = TrainConfig {
        structure: kind,
        evaluation: stopwise::belief::EvaluationCosts::Uniform(0.002),
        ..TrainConfig::default()
    };
    train(&common::synthetic(400, 1), &cfg).unwrap().model
}

fn fingerprint(d: &Decision) -> (usize, usize, u64, Vec<Vec<u64>>) {
    (
        d.class,
        d.features_used,
        d.realized_cost.to_bits(),
        d.trace
            .iter()
            .map(|s| s.posterior.as_slice().iter().map(|p| p.to_bits()).collect())
            .collect(),
    )
}

#[test]
fn round_trip_decides_bit_for_bit() {
    let test = common::synthetic(200, 2);
    for kind in StructureKind::ALL {
        let model = trained(kind);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
        for i in 0..test.n_instances() {
            let a = model.classify_row(test.row(i)).unwrap();
            let b = loaded.classify_row(test.row(i)).unwrap();
            assert_eq!(fingerprint(&a), fingerprint(&b));
        }
    }
}

#[test]
fn text_round_trip_is_stable() {
    let model = trained(StructureKind::Tree);
    let text = to_string(&model).unwrap();
    assert_eq!(to_string(&from_str(&text).unwrap()).unwrap(), text);
}

#[test]
fn unknown_version_is_rejected() {
    let text = to_string(&trained(StructureKind::Line)).unwrap();
    let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 999", 1);
    assert_ne!(bumped, text);
    match from_str(&bumped) {
        Err(HarnessError::Version { found, expected }) => {
            assert_eq!(found, "999");
            assert_eq!(expected, 1);
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn truncated_file_is_a_format_error() {
    let text = to_string(&trained(StructureKind::Tree)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.json");
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_model(&path), Err(HarnessError::ModelFormat(_))));
    assert!(matches!(from_str(""), Err(HarnessError::ModelFormat(_))));
    assert!(matches!(from_str("{}"), Err(HarnessError::ModelFormat(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_model(dir.path().join("absent.json")), Err(HarnessError::Io { .. })));
}

#[test]
fn inconsistent_model_is_rejected() {
    let model = trained(StructureKind::Tree);
    let mut tree: serde_json::Value = serde_json::from_str(&to_string(&model).unwrap()).unwrap();
    tree["class_labels"] = serde_json::json!(["only"]);
    assert!(from_str(&tree.to_string()).is_err());

    let mut tree: serde_json::Value = serde_json::from_str(&to_string(&model).unwrap()).unwrap();
    tree["policy"]["stages"][0]["vectors"][0] = serde_json::json!([]);
    assert!(from_str(&tree.to_string()).is_err());
}
