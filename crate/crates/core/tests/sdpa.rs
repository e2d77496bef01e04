mod common;

use lipcert::assembly::{assemble_l2_feedforward, MultiplierClass};
use lipcert::model::load_model;
use lipcert::solver::{parse_sdpa, parse_sdpa_solution, solve, write_sdpa, write_sdpa_solution, SolverConfig};
use nalgebra::DVector;

#[test]
fn golden_file_round_trips() {
    let golden = std::fs::read_to_string(common::fixture("lambda_max.dat-s")).unwrap();
    let p = parse_sdpa(&golden).unwrap();
    assert_eq!(p.num_vars, 1);
    assert_eq!(p.blocks[0].f0[(1, 1)], 3.0);
    assert_eq!(write_sdpa(&p).unwrap(), golden);
}

#[test]
fn assembled_problem_round_trips() {
    let m = load_model(common::fixture("bare_maxmin.json")).unwrap();
    let p = assemble_l2_feedforward(&m, MultiplierClass::Neuron2, true).unwrap();
    let text = write_sdpa(&p).unwrap();
    let back = parse_sdpa(&text).unwrap();
    assert_eq!(back.var_names, p.var_names);
    assert_eq!(back.blocks.len(), p.blocks.len());
    let z = DVector::from_fn(p.num_vars, |i, _| 0.5 + i as f64);
    assert!((back.max_violation(&z) - p.max_violation(&z)).abs() < 1e-12);
}

#[test]
fn solution_file_imports() {
    let m = load_model(common::fixture("bare_maxmin.json")).unwrap();
    let p = assemble_l2_feedforward(&m, MultiplierClass::Neuron2, true).unwrap();
    let r = solve(&p, &SolverConfig::default()).unwrap();
    let text = write_sdpa_solution(&p, &r);
    let back = parse_sdpa_solution(&text, &p, &SolverConfig::default()).unwrap();
    assert!(back.is_optimal());
    assert!((back.rho - r.rho).abs() < 1e-9);
}

#[test]
fn garbage_is_rejected() {
    assert!(parse_sdpa("not an sdpa file").is_err());
}
