//! SDP solving: the built-in interior-point method, certificate checks and
//! SDPA file interchange.

mod ipm;
mod scaling;
pub mod sdpa;

use nalgebra::{DMatrix, DVector};

use crate::error::{LipError, Result};
use crate::linalg::{asymmetry, lambda_max, lambda_min};
use crate::sdp::SdpProblem;
use scaling::Equilibration;

pub use sdpa::{
    export_sdpa, import_sdpa, import_sdpa_solution, parse_sdpa, parse_sdpa_solution, write_sdpa, write_sdpa_solution,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalError,
}

impl SolveStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Optimal => "optimal",
            Self::Infeasible => "infeasible",
            Self::Unbounded => "unbounded",
            Self::MaxIterations => "max_iterations",
            Self::NumericalError => "numerical_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Internal,
    SdpaExport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub max_iters: usize,
    pub backend: Backend,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol_gap: 1e-8, tol_feas: 1e-8, max_iters: 200, backend: Backend::Internal }
    }
}

impl SolverConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol_gap: tol, tol_feas: tol, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol_gap > 0.0 && self.tol_feas > 0.0) {
            return Err(LipError::Value("solver tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Residuals recomputed from `z` and the block multipliers, relative to the data scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// Largest positive eigenvalue of `F0 + Σ z_k F_k` over blocks.
    pub primal_feas: f64,
    /// Violation of `<F_k, X> + c_k = 0` and of `X ⪰ 0`.
    pub dual_feas: f64,
    /// `|cᵀz - <F0, X>|`
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub z: DVector<f64>,
    pub rho: f64,
    pub lipschitz_bound: f64,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub kkt_residuals: KktResiduals,
    pub iterations: usize,
    /// Multiplier matrix for every problem block.
    pub dual_blocks: Vec<DMatrix<f64>>,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// True iff `λ_min(m) >= -tol`.
pub fn psd_check(m: &DMatrix<f64>, tol: f64) -> Result<bool> {
    if !m.is_square() {
        return Err(LipError::Dimension("psd_check needs a square matrix".into()));
    }
    if asymmetry(m) > 1e-12 {
        return Err(LipError::Value("psd_check needs a symmetric matrix".into()));
    }
    if m.nrows() == 0 {
        return Ok(true);
    }
    Ok(lambda_min(m) >= -tol)
}

fn data_scale(problem: &SdpProblem) -> f64 {
    1.0 + problem.blocks.iter().map(|b| b.f0.norm_squared()).sum::<f64>().sqrt()
}

/// Recomputes optimality residuals without trusting any solver internals.
///
/// `primal_feas` is the largest block eigenvalue over `1 + ‖F0‖`. `dual_feas`
/// is a backward error: each entry of `c + A*(X)` is divided by
/// `1 + |c_k| + Σ_b ‖F_k‖‖X_b‖`, and negative eigenvalues of `X_b` by
/// `1 + ‖X_b‖`. `gap` is `|cᵀz - ⟨F0, X⟩| / (1 + |cᵀz|)`.
pub fn kkt_residuals(problem: &SdpProblem, z: &DVector<f64>, x_blocks: &[DMatrix<f64>]) -> KktResiduals {
    let violation = problem.max_violation(z).max(0.0);
    let primal_feas = if problem.blocks.is_empty() { 0.0 } else { violation / data_scale(problem) };

    let mut lin = problem.objective.clone();
    let mut size = problem.objective.map(|c| 1.0 + c.abs());
    let mut neg = 0.0f64;
    let mut f0x = 0.0;
    for (block, x) in problem.blocks.iter().zip(x_blocks) {
        let xn = x.norm();
        for (k, f) in &block.terms {
            lin[*k] += f.dot(x);
            size[*k] += f.norm() * xn;
        }
        f0x += block.f0.dot(x);
        neg = neg.max(-lambda_min(x) / (1.0 + xn)).max(0.0);
    }
    let dual_feas = lin.component_div(&size).amax().max(neg);
    let obj = problem.objective.dot(z);
    KktResiduals { primal_feas, dual_feas, gap: (obj - f0x).abs() / (1.0 + obj.abs()) }
}

/// Relative defect of a dual ray `X` as an infeasibility certificate
/// (`X ⪰ 0`, `⟨F_k, X⟩ = 0`, `⟨F0, X⟩ > 0`); infinite when `⟨F0, X⟩ <= 0`.
pub fn infeasibility_residual(problem: &SdpProblem, x_blocks: &[DMatrix<f64>]) -> f64 {
    let mut lin: DVector<f64> = DVector::zeros(problem.num_vars);
    let mut size: DVector<f64> = DVector::zeros(problem.num_vars);
    let mut f0x = 0.0;
    let mut f0_size = 0.0;
    let mut neg = 0.0f64;
    for (block, x) in problem.blocks.iter().zip(x_blocks) {
        let xn = x.norm();
        for (k, f) in &block.terms {
            lin[*k] += f.dot(x);
            size[*k] += f.norm() * xn;
        }
        f0x += block.f0.dot(x);
        f0_size += block.f0.norm() * xn;
        neg = neg.max(-lambda_min(x) / xn.max(f64::MIN_POSITIVE));
    }
    if !(f0x > 0.0) {
        return f64::INFINITY;
    }
    let separation = f0x / f0_size;
    let defect = lin.iter().zip(size.iter()).map(|(l, s)| if *s > 0.0 { l.abs() / s } else { 0.0 }).fold(0.0, f64::max);
    (defect / separation).max(neg)
}

/// Builds a result from a candidate point, downgrading `Optimal` and
/// `Infeasible` when the recomputed residuals exceed the tolerances.
pub fn finalize(
    problem: &SdpProblem,
    config: &SolverConfig,
    mut status: SolveStatus,
    z: DVector<f64>,
    dual_blocks: Vec<DMatrix<f64>>,
    iterations: usize,
) -> SolveResult {
    let kkt = kkt_residuals(problem, &z, &dual_blocks);
    if status == SolveStatus::Optimal
        && (kkt.primal_feas > config.tol_feas || kkt.dual_feas > config.tol_feas || kkt.gap > config.tol_gap)
    {
        status = SolveStatus::NumericalError;
    }
    if status == SolveStatus::Infeasible && infeasibility_residual(problem, &dual_blocks) > config.tol_feas {
        status = SolveStatus::NumericalError;
    }
    let rho = problem.rho_index.map_or(f64::NAN, |k| z[k]);
    let dual_obj = problem.blocks.iter().zip(&dual_blocks).map(|(b, x)| b.f0.dot(x)).sum();
    SolveResult {
        status,
        lipschitz_bound: problem.bound_semantics.transform(rho),
        rho,
        primal_obj: problem.objective.dot(&z),
        dual_obj,
        kkt_residuals: kkt,
        iterations,
        z,
        dual_blocks,
    }
}

/// Solves `min cᵀz s.t. F0 + Σ z_k F_k ⪯ 0` with the built-in solver.
pub fn solve(problem: &SdpProblem, config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    problem.validate()?;
    if config.backend == Backend::SdpaExport {
        return Err(LipError::Unsupported(
            "the sdpa-export backend writes a problem file; use export_sdpa and import_sdpa_solution".into(),
        ));
    }
    let eq = Equilibration::compute(problem);
    let balanced = eq.apply(problem);
    // Points are judged by their residuals on the original problem.
    let accept = |status: SolveStatus, y: &DVector<f64>, x: &[DMatrix<f64>]| {
        let (z, x) = eq.recover(y, x);
        if status == SolveStatus::Infeasible {
            return infeasibility_residual(problem, &x) <= config.tol_feas;
        }
        let kkt = kkt_residuals(problem, &z, &x);
        kkt.primal_feas <= config.tol_feas && kkt.dual_feas <= config.tol_feas && kkt.gap <= config.tol_gap
    };
    let out = ipm::run(&balanced, config, &accept)?;
    let stalled = matches!(out.status, SolveStatus::NumericalError | SolveStatus::MaxIterations);
    let status = if stalled && accept(SolveStatus::Optimal, &out.z, &out.x_blocks) {
        SolveStatus::Optimal
    } else {
        out.status
    };
    let (z, x) = eq.recover(&out.z, &out.x_blocks);
    Ok(finalize(problem, config, status, z, x, out.iterations))
}

/// Largest eigenvalue of `F0 + Σ z_k F_k` for each block.
pub fn block_violations(problem: &SdpProblem, z: &DVector<f64>) -> Vec<f64> {
    problem.blocks.iter().map(|b| lambda_max(&b.evaluate(z))).collect()
}
