mod common;

use lipcert::model::{load_model, Architecture, Model};
use lipcert::LipError;
use nalgebra::DVector;

#[test]
fn fixtures_load() {
    for (name, arch) in [
        ("bare_maxmin.json", Architecture::Feedforward),
        ("linear_l1.json", Architecture::Feedforward),
        ("residual_zero_g.json", Architecture::Residual),
        ("deq_contractive.json", Architecture::Deq),
        ("deq_expansive.json", Architecture::Deq),
        ("node_damped.json", Architecture::NeuralOde),
    ] {
        let m = load_model(common::fixture(name)).unwrap();
        assert_eq!(m.arch, arch, "{name}");
    }
}

#[test]
fn group_size_must_divide_width() {
    let text = r#"{
        "arch": "feedforward",
        "activation": {"kind": "groupsort", "group_size": 3},
        "layers": [
            {"W": [[1,0],[0,1],[1,1],[1,-1]], "b": [0,0,0,0]},
            {"W": [[1,1,1,1]], "b": [0]}
        ]
    }"#;
    assert!(matches!(Model::from_json_str(text), Err(LipError::Dimension(_))));
}

#[test]
fn householder_vector_must_be_unit() {
    let text = r#"{
        "arch": "feedforward",
        "activation": {"kind": "householder", "group_size": 2, "v": [1, 1]},
        "layers": [
            {"W": [[1,0],[0,1]], "b": [0,0]},
            {"W": [[1,1]], "b": [0]}
        ]
    }"#;
    assert!(matches!(Model::from_json_str(text), Err(LipError::Value(_))));
}

#[test]
fn malformed_json_is_a_parse_error() {
    assert!(matches!(Model::from_json_str("{\"arch\": "), Err(LipError::Parse(_))));
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(load_model("/nonexistent/model.json"), Err(LipError::Io(_))));
}

#[test]
fn save_and_reload_round_trip() {
    let mut rng = common::rng(11);
    let m = common::random_maxmin(&mut rng, 3, 8, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    m.save(&path).unwrap();
    let back = load_model(&path).unwrap();
    let x = DVector::from_vec(vec![0.3; m.input_dim()]);
    assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    assert_eq!(m.hidden_widths(), back.hidden_widths());
}

#[test]
fn bare_maxmin_sorts_pairs() {
    let m = load_model(common::fixture("bare_maxmin.json")).unwrap();
    let y = m.forward(&DVector::from_vec(vec![-1.0, 2.0])).unwrap();
    assert_eq!(y.as_slice(), &[2.0, -1.0]);
}
