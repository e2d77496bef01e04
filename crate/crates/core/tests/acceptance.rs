//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any failure.

mod common;

use std::time::Instant;

use lipcert::assembly::{assemble_l2_residual, MultiplierClass};
use lipcert::baselines::{fgl_bound, grid_ratio, mp_bound, norm_eq_bound, pair_ratio_lower_bound, sample_lower_bound, Norm};
use lipcert::certify::{certify, certify_deq, certify_deq_wellposed, CertifyOptions};
use lipcert::cli::run_captured;
use lipcert::linalg::{lambda_max, sigma_max, symmetrize};
use lipcert::model::{ActivationSpec, Model};
use lipcert::qc::{verify_qc_random, verify_qc_sample, MultiplierParams, QcKind};
use lipcert::rng::unit_vector;
use lipcert::sdp::{AffineLmiBlock, BoundSemantics, SdpProblem};
use lipcert::solver::{parse_sdpa_solution, psd_check, solve, write_sdpa, SolveStatus, SolverConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn l2(model: &Model, mclass: MultiplierClass, dense: bool) -> Result<f64, String> {
    let c = ok(certify(model, &CertifyOptions { mclass, dense, ..Default::default() }))?;
    ensure(c.is_certified(), || format!("solver status {:?}", c.status))?;
    Ok(c.bound)
}

fn linf(model: &Model) -> Result<f64, String> {
    let c = ok(certify(model, &CertifyOptions { norm: Norm::LinfL1, ..Default::default() }))?;
    ensure(c.is_certified(), || format!("solver status {:?}", c.status))?;
    Ok(c.bound)
}

fn json_value(stdout: &str) -> Result<f64, String> {
    let v: serde_json::Value = ok(serde_json::from_str(stdout))?;
    v["results"][0]["value"].as_f64().ok_or_else(|| "report has no value".to_string())
}

fn motivating_example() -> Check {
    let path = common::fixture("bare_maxmin.json");
    let path = path.to_str().unwrap();
    let out = run_captured(["lipcert", "certify", "--norm", "l2", "--model", path]);
    ensure(out.code == 0, || format!("certify exit {}: {}", out.code, out.stderr))?;
    let nsr = json_value(&out.stdout)?;
    let out = run_captured(["lipcert", "bound", "--method", "rr", "--model", path]);
    ensure(out.code == 0, || format!("bound exit {}: {}", out.code, out.stderr))?;
    let rr = json_value(&out.stdout)?;
    ensure((nsr - 1.0).abs() <= 1e-6, || format!("nsr = {nsr}"))?;
    ensure((rr - 2f64.sqrt()).abs() <= 1e-6, || format!("rr = {rr}"))?;
    Ok(format!("nsr = {nsr:.9}, rr = {rr:.9}"))
}

fn mp_equivalence() -> Check {
    let mut rng = common::rng(2);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let depth = rng.random_range(2..=4);
        let n_out = rng.random_range(1..=4);
        let m = common::random_maxmin(&mut rng, depth, 16, n_out);
        let layer1 = l2(&m, MultiplierClass::Layer1, false)?;
        let prod: f64 = m.layers.iter().map(|l| sigma_max(&l.weight)).product();
        let rel = (layer1 - prod).abs() / prod;
        worst = worst.max(rel);
        ensure(rel <= 1e-6, || format!("layer1 {layer1} vs product {prod}"))?;
    }
    Ok(format!("max relative deviation {worst:.2e}"))
}

fn ordering_suites() -> Check {
    let started = Instant::now();
    let mut rng = common::rng(3);
    for i in 0..20 {
        let depth = rng.random_range(2..=5);
        let m = common::random_maxmin(&mut rng, depth, 16, 1);
        let sample = ok(sample_lower_bound(&m, Norm::L2, 20_000, i))?.value;
        let nsr = l2(&m, MultiplierClass::Neuron2, false).map_err(|e| format!("net {i} l2: {e}"))?;
        let mp = ok(mp_bound(&m))?.value;
        ensure(sample <= nsr + 1e-6 && nsr <= mp + 1e-6, || format!("net {i}: sample {sample}, nsr {nsr}, mp {mp}"))?;
        let sample_inf = ok(sample_lower_bound(&m, Norm::LinfL1, 20_000, i))?.value;
        let nsr_inf = linf(&m).map_err(|e| format!("net {i} linf: {e}"))?;
        let eq = ok(norm_eq_bound(nsr, m.input_dim()))?.value;
        ensure(sample_inf <= nsr_inf + 1e-6 && nsr_inf <= eq + 1e-6, || {
            format!("net {i}: sample {sample_inf}, nsr-linf {nsr_inf}, norm-eq {eq}")
        })?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1}s"))?;
    Ok(format!("20 nets in {secs:.1}s"))
}

fn qc_suites() -> Check {
    const TRIALS: usize = 100_000;
    let mut worst = f64::INFINITY;
    for ng in [2, 4] {
        let s = ok(verify_qc_random(&ActivationSpec::groupsort(ng), &QcKind::GroupSort, 3, TRIALS, ng as u64))?;
        ensure(s.min_value >= -1e-9, || format!("groupsort n_g={ng}: {}", s.min_value))?;
        worst = worst.min(s.min_value);
    }
    let mut rng = common::rng(4);
    for i in 0..10 {
        let ng = if i % 2 == 0 { 2 } else { 4 };
        let v = unit_vector(&mut rng, ng);
        let act = ok(ActivationSpec::householder(v.clone()))?;
        let s = ok(verify_qc_random(&act, &QcKind::Householder(v), 2, TRIALS, 100 + i))?;
        ensure(s.min_value >= -1e-9, || format!("householder #{i}: {}", s.min_value))?;
        worst = worst.min(s.min_value);
    }
    let mut params = MultiplierParams::zeros(QcKind::GroupSort, 2, 2);
    params.gamma.fill(1.0);
    let relu = ok(verify_qc_sample(&ActivationSpec::relu(), &params, TRIALS, 5))?;
    ensure(relu.min_value < -0.1, || format!("relu control only reached {}", relu.min_value))?;
    Ok(format!("min over valid QCs {worst:.2e}, relu control {:.3}", relu.min_value))
}

fn solver_oracle() -> Check {
    let mut rng = common::rng(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = symmetrize(&DMatrix::from_fn(6, 6, |_, _| rng.random::<f64>() * 2.0 - 1.0));
        let mut p = SdpProblem::new(BoundSemantics::RhoLinfL1);
        let t = p.add_rho();
        let mut b = AffineLmiBlock::new(a.clone());
        b.add_term(t, -DMatrix::identity(6, 6));
        p.add_block(b);
        let r = ok(solve(&p, &SolverConfig::default()))?;
        ensure(r.status == SolveStatus::Optimal, || format!("status {:?}", r.status))?;
        for blk in &p.blocks {
            ensure(ok(psd_check(&symmetrize(&-blk.evaluate(&r.z)), 1e-8))?, || "re-substitution failed".into())?;
        }
        let err = (r.rho - lambda_max(&a)).abs();
        worst = worst.max(err);
        ensure(err <= 1e-7, || format!("|t* - λmax| = {err:e}"))?;
    }
    let golden = ok(std::fs::read_to_string(common::fixture("lambda_max.dat-s")))?;
    let mut p = SdpProblem::new(BoundSemantics::RhoLinfL1);
    let t = p.add_rho();
    let mut b = AffineLmiBlock::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0])));
    b.add_term(t, -DMatrix::identity(2, 2));
    p.add_block(b);
    let written = ok(write_sdpa(&p))?;
    ensure(written == golden, || "export differs from golden file".into())?;
    let reparsed = ok(lipcert::solver::parse_sdpa(&golden))?;
    ensure(ok(write_sdpa(&reparsed))? == golden, || "round trip not byte-exact".into())?;
    let r = ok(solve(&p, &SolverConfig::default()))?;
    let sol = lipcert::solver::write_sdpa_solution(&p, &r);
    let back = ok(parse_sdpa_solution(&sol, &p, &SolverConfig::default()))?;
    ensure(back.status == SolveStatus::Optimal && (back.rho - 3.0).abs() < 1e-7, || "solution import".into())?;
    Ok(format!("max |t* - λmax| = {worst:.2e}; golden round trip exact"))
}

fn decomposed_dense_agreement() -> Check {
    let mut rng = common::rng(6);
    let mut worst = 0.0f64;
    let mut agree = 0;
    let mut below_sample = Vec::new();
    for i in 0..10 {
        let depth = rng.random_range(2..=3);
        let n_out = rng.random_range(1..=3);
        let m = common::random_maxmin(&mut rng, depth, 8, n_out);
        let dec = l2(&m, MultiplierClass::Neuron2, false)?;
        let dense = l2(&m, MultiplierClass::Neuron2, true)?;
        let sample = ok(sample_lower_bound(&m, Norm::L2, 20_000, i))?.value;
        if dense < sample - 1e-6 {
            below_sample.push(i);
        }
        let rel = (dec - dense).abs() / dec;
        worst = worst.max(rel);
        if rel <= 1e-5 {
            agree += 1;
        }
    }
    ensure(below_sample.is_empty(), || format!("dense bound below sampled ratio on nets {below_sample:?}"))?;
    let summary = format!("{agree}/10 nets agree within 1e-5, max relative gap {worst:.2e}");
    ensure(agree == 10, || format!("{summary}; dense is tighter and stays above the sampled ratio"))?;
    Ok(summary)
}

fn residual_sanity() -> Check {
    let zero = ok(lipcert::model::load_model(common::fixture("residual_zero_g.json")))?;
    let r = ok(solve(&ok(assemble_l2_residual(&zero, true, false))?, &SolverConfig::default()))?;
    ensure(r.status == SolveStatus::Optimal && (r.rho - 1.0).abs() <= 1e-6, || format!("G=0: ρ = {}", r.rho))?;
    let mut rng = common::rng(7);
    let mut slack = f64::INFINITY;
    for _ in 0..20 {
        let n = common::even_width(&mut rng, 6);
        let hidden = common::even_width(&mut rng, 8);
        let m = common::random_single_residual(&mut rng, n, hidden);
        let c = ok(certify(&m, &CertifyOptions::default()))?;
        ensure(c.is_certified(), || format!("status {:?}", c.status))?;
        let p = m.single_res.as_ref().unwrap();
        let loose = sigma_max(&p.h1) + sigma_max(&p.g1) * sigma_max(&p.w1);
        ensure(c.bound <= loose + 1e-6, || format!("bound {} above {loose}", c.bound))?;
        slack = slack.min(loose - c.bound);
    }
    Ok(format!("ρ(G=0) = {:.9}; min slack to norm bound {slack:.3e}", r.rho))
}

fn implicit_models() -> Check {
    let cfg = SolverConfig::default();
    let mut rng = common::rng(8);
    let deq = common::random_deq(&mut rng, 6, 4, 3, 0.5);
    let wp = ok(certify_deq_wellposed(&deq, &cfg))?;
    ensure(wp.is_certified(), || format!("well-posedness status {:?}", wp.status))?;
    let (_, lip) = ok(certify_deq(&deq, false, &cfg))?;
    ensure(lip.is_certified(), || format!("deq lipschitz status {:?}", lip.status))?;
    let emp = ok(pair_ratio_lower_bound(&deq, Norm::L2, 1000, 8))?.value;
    ensure(emp <= lip.bound + 1e-9, || format!("deq ratio {emp} above {}", lip.bound))?;

    let bad = Model::deq(
        lipcert::model::DeqParams {
            w: DMatrix::identity(2, 2) * 2.0,
            u: DMatrix::identity(2, 2),
            w_out: DMatrix::identity(2, 2),
            b_z: DVector::zeros(2),
            b_y: DVector::zeros(2),
        },
        ActivationSpec::maxmin(),
    )
    .unwrap();
    let r = ok(certify_deq_wellposed(&bad, &cfg))?;
    ensure(r.status == SolveStatus::Infeasible, || format!("W=2I status {:?}", r.status))?;

    let node = common::random_node(&mut rng, 4);
    let c = ok(certify(&node, &CertifyOptions::default()))?;
    ensure(c.is_certified(), || format!("node status {:?}", c.status))?;
    let node_emp = ok(pair_ratio_lower_bound(&node, Norm::L2, 1000, 9))?.value;
    ensure(node_emp <= c.bound + 1e-9, || format!("node ratio {node_emp} above {}", c.bound))?;
    Ok(format!(
        "deq √ρ = {:.4} ≥ {emp:.4}; W=2I infeasible; node exp(ρ/2) = {:.4} ≥ {node_emp:.4}",
        lip.bound, c.bound
    ))
}

fn fgl_cross_check() -> Check {
    let mut rng = common::rng(9);
    for i in 0..10 {
        let n0 = rng.random_range(2..=4);
        let n_out = rng.random_range(1..=3);
        let m = common::feedforward(&mut rng, &[n0, 4, n_out], ActivationSpec::maxmin());
        let sample = ok(sample_lower_bound(&m, Norm::L2, 20_000, i))?.value;
        let fgl = ok(fgl_bound(&m, Norm::L2))?.value;
        let nsr = l2(&m, MultiplierClass::Neuron2, false)?;
        ensure(sample <= fgl + 1e-9 && fgl <= nsr + 1e-6, || format!("sample {sample}, fgl {fgl}, nsr {nsr}"))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let m = common::feedforward(&mut rng, &[2, 2, 2], ActivationSpec::maxmin());
        let fgl = ok(fgl_bound(&m, Norm::L2))?.value;
        let grid = ok(grid_ratio(&m, Norm::L2, 61, 1.0))?;
        let rel = (fgl - grid).abs() / fgl;
        worst = worst.max(rel);
        ensure(rel <= 0.01, || format!("fgl {fgl} vs grid {grid}"))?;
    }
    Ok(format!("ordering holds; width-2 grid gap {:.3}%", worst * 100.0))
}

/// `max_P max_s |w P s|` over MaxMin Jacobians `P` and sign vectors `s`.
fn sign_pattern_oracle(w: &[f64]) -> f64 {
    let n = w.len();
    let mut best = 0.0f64;
    for swaps in 0..(1u32 << (n / 2)) {
        let mut wp = w.to_vec();
        for g in 0..n / 2 {
            if swaps >> g & 1 == 1 {
                wp.swap(2 * g, 2 * g + 1);
            }
        }
        for signs in 0..(1u32 << n) {
            let v: f64 = (0..n).map(|j| if signs >> j & 1 == 1 { wp[j] } else { -wp[j] }).sum();
            best = best.max(v.abs());
        }
    }
    best
}

fn linf_analytic() -> Check {
    let w = [1.0, 1.0];
    let m = Model::feedforward(
        vec![(DMatrix::identity(2, 2), DVector::zeros(2)), (DMatrix::from_row_slice(1, 2, &w), DVector::zeros(1))],
        Some(ActivationSpec::maxmin()),
    )
    .unwrap();
    let rho = linf(&m)?;
    let oracle = sign_pattern_oracle(&w);
    ensure((rho - oracle).abs() <= 1e-6 && (oracle - 2.0).abs() < 1e-12, || format!("ρ = {rho}, oracle {oracle}"))?;
    let lin = Model::feedforward(vec![(DMatrix::from_row_slice(1, 2, &[3.0, -4.0]), DVector::zeros(1))], None).unwrap();
    let l1 = linf(&lin)?;
    ensure((l1 - 7.0).abs() <= 1e-6, || format!("linear ρ = {l1}"))?;
    let sdp = ok(lipcert::assembly::assemble_linf(&lin, 0, MultiplierClass::Neuron2))?;
    let r = ok(solve(&sdp, &SolverConfig::default()))?;
    ensure((r.rho - 7.0).abs() <= 1e-6, || format!("linear SDP ρ = {}", r.rho))?;
    Ok(format!("ρ = {rho:.9} (oracle {oracle}); linear ρ = {:.9}", r.rho))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("motivating MaxMin example", motivating_example),
        ("layer-wise multipliers reproduce the weight-norm product", mp_equivalence),
        ("ordering of lower and upper bounds", ordering_suites),
        ("quadratic constraint sampling", qc_suites),
        ("solver oracle and SDPA round trip", solver_oracle),
        ("decomposed and dense agreement", decomposed_dense_agreement),
        ("residual sanity", residual_sanity),
        ("implicit models", implicit_models),
        ("pattern-search cross-check", fgl_cross_check),
        ("linf analytic cases", linf_analytic),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        match check() {
            Ok(detail) => println!("PASS {:>2} {name} ({detail}) [{:.1}s]", i + 1, t.elapsed().as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{:.1}s]", i + 1, t.elapsed().as_secs_f64());
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
