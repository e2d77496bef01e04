//! End-to-end certification: picks the assembly for a model, solves it and
//! turns the optimum into a bound.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::assembly::{
    assemble_deq_lipschitz, assemble_deq_wellposed, assemble_l2_feedforward, assemble_l2_residual, assemble_linf,
    assemble_linf_dense, assemble_node_lipschitz, assemble_rr, MultiplierClass, WellPosedness,
};
use crate::baselines::{finite_or_null, BoundMethod, BoundReport, Norm};
use crate::error::{LipError, Result};
use crate::linalg::sigma_max;
use crate::model::{Architecture, Layer, Model};
use crate::sdp::SdpProblem;
use crate::solver::{solve, KktResiduals, SolveStatus, SolverConfig};

#[derive(Debug, Clone)]
pub struct CertifyOptions {
    pub norm: Norm,
    /// Output row certified in the ℓ∞ setting.
    pub label: usize,
    pub mclass: MultiplierClass,
    /// Single end-to-end block instead of the per-layer decomposition.
    pub dense: bool,
    /// Number of consecutive sub-networks certified separately (bounds multiply).
    pub split: usize,
    pub zero_s: bool,
    pub zero_p: bool,
    pub solver: SolverConfig,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            norm: Norm::L2,
            label: 0,
            mclass: MultiplierClass::Neuron2,
            dense: false,
            split: 1,
            zero_s: true,
            zero_p: false,
            solver: SolverConfig::default(),
        }
    }
}

/// A piece of a certificate: either an SDP or a closed-form value.
#[derive(Debug, Clone)]
pub enum Segment {
    Sdp(SdpProblem),
    Exact(f64),
}

#[derive(Debug, Clone)]
pub struct SegmentResult {
    pub status: SolveStatus,
    pub rho: f64,
    pub bound: f64,
    pub iterations: usize,
    pub num_vars: usize,
    pub lmi_dim: usize,
    pub kkt: Option<KktResiduals>,
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub method: BoundMethod,
    pub norm: Norm,
    pub status: SolveStatus,
    /// Product of the segment bounds; NaN unless every segment is optimal.
    pub bound: f64,
    pub segments: Vec<SegmentResult>,
    pub runtime_seconds: f64,
}

impl Certificate {
    pub fn is_certified(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn to_report(&self) -> BoundReport {
        let mut r = BoundReport {
            method: self.method,
            value: self.bound,
            norm: self.norm,
            runtime_seconds: self.runtime_seconds,
            lower_bound: false,
            metadata: Default::default(),
        };
        r.metadata.insert("status".into(), json!(self.status.name()));
        let segs: Vec<_> = self
            .segments
            .iter()
            .map(|s| {
                json!({
                    "status": s.status.name(),
                    "rho": finite_or_null(s.rho),
                    "bound": finite_or_null(s.bound),
                    "iterations": s.iterations,
                    "num_vars": s.num_vars,
                    "lmi_dim": s.lmi_dim,
                    "kkt": s.kkt.map(|k| json!({
                        "primal_feas": k.primal_feas,
                        "dual_feas": k.dual_feas,
                        "gap": k.gap,
                    })),
                })
            })
            .collect();
        r.metadata.insert("segments".into(), json!(segs));
        r
    }
}

fn solve_segments(
    method: BoundMethod,
    norm: Norm,
    segments: Vec<Segment>,
    config: &SolverConfig,
    started: Instant,
) -> Result<Certificate> {
    let mut results = Vec::with_capacity(segments.len());
    for seg in segments {
        results.push(match seg {
            Segment::Exact(v) => SegmentResult {
                status: SolveStatus::Optimal,
                rho: f64::NAN,
                bound: v,
                iterations: 0,
                num_vars: 0,
                lmi_dim: 0,
                kkt: None,
            },
            Segment::Sdp(p) => {
                let r = solve(&p, config)?;
                SegmentResult {
                    status: r.status,
                    rho: r.rho,
                    bound: r.lipschitz_bound,
                    iterations: r.iterations,
                    num_vars: p.num_vars,
                    lmi_dim: p.total_dim(),
                    kkt: Some(r.kkt_residuals),
                }
            }
        });
    }
    let status = results
        .iter()
        .map(|r| r.status)
        .find(|s| *s != SolveStatus::Optimal)
        .unwrap_or(SolveStatus::Optimal);
    let bound = if status == SolveStatus::Optimal {
        results.iter().map(|r| r.bound).product()
    } else {
        f64::NAN
    };
    Ok(Certificate { method, norm, status, bound, segments: results, runtime_seconds: started.elapsed().as_secs_f64() })
}

/// Consecutive sub-networks whose bounds multiply to a bound of the whole.
pub fn split_feedforward(model: &Model, parts: usize) -> Result<Vec<Model>> {
    let n = model.layers.len();
    if parts == 0 || parts > n {
        return Err(LipError::Value(format!("cannot split {n} layers into {parts} parts")));
    }
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = n / parts + usize::from(i < n % parts);
        let mut layers: Vec<Layer> = model.layers[start..start + len].to_vec();
        start += len;
        if let Some(last) = layers.last().filter(|l| l.activation.is_some()) {
            let w = last.weight.nrows();
            layers.push(Layer::affine(DMatrix::identity(w, w), DVector::zeros(w)));
        }
        let pairs = layers.into_iter().map(|l| (l.weight, l.bias)).collect();
        out.push(Model::feedforward(pairs, model.activation.clone())?);
    }
    Ok(out)
}

fn linear_product(model: &Model) -> DMatrix<f64> {
    let mut m = DMatrix::identity(model.input_dim(), model.input_dim());
    for layer in &model.layers {
        m = &layer.weight * m;
    }
    m
}

/// The problems (or closed-form values) whose bounds multiply to the certificate.
pub fn certification_segments(model: &Model, opts: &CertifyOptions) -> Result<(BoundMethod, Vec<Segment>)> {
    let method = match opts.norm {
        Norm::L2 => BoundMethod::NsrL2,
        Norm::LinfL1 => BoundMethod::NsrLinf,
    };
    if opts.split != 1 && !(model.arch == Architecture::Feedforward && opts.norm == Norm::L2) {
        return Err(LipError::Value("splitting applies to ℓ2 certificates of feedforward models".into()));
    }
    let segments = match (model.arch, opts.norm) {
        (Architecture::Feedforward, Norm::L2) => split_feedforward(model, opts.split)?
            .into_iter()
            .map(|m| {
                if m.hidden_widths().is_empty() {
                    Ok(Segment::Exact(sigma_max(&linear_product(&m))))
                } else {
                    assemble_l2_feedforward(&m, opts.mclass, !opts.dense).map(Segment::Sdp)
                }
            })
            .collect::<Result<_>>()?,
        (Architecture::Feedforward, Norm::LinfL1) => {
            let scalar = model.select_output(opts.label)?;
            if scalar.hidden_widths().is_empty() {
                vec![Segment::Exact(linear_product(&scalar).iter().map(|v| v.abs()).sum())]
            } else if opts.dense {
                vec![Segment::Sdp(assemble_linf_dense(model, opts.label, opts.mclass)?)]
            } else {
                vec![Segment::Sdp(assemble_linf(model, opts.label, opts.mclass)?)]
            }
        }
        (Architecture::Residual | Architecture::SingleLayerResidual, Norm::L2) => {
            vec![Segment::Sdp(assemble_l2_residual(model, opts.zero_s, opts.zero_p)?)]
        }
        (Architecture::NeuralOde, Norm::L2) => vec![Segment::Sdp(assemble_node_lipschitz(model)?)],
        (Architecture::Deq, Norm::L2) => {
            return Err(LipError::Unsupported("DEQ models are certified with certify_deq".into()))
        }
        (arch, Norm::LinfL1) => {
            return Err(LipError::Unsupported(format!("ℓ∞ certificates cover feedforward models, got {arch:?}")))
        }
    };
    Ok((method, segments))
}

/// Certified Lipschitz bound for feedforward, residual and neural ODE models.
pub fn certify(model: &Model, opts: &CertifyOptions) -> Result<Certificate> {
    let started = Instant::now();
    let (method, segments) = certification_segments(model, opts)?;
    solve_segments(method, opts.norm, segments, &opts.solver, started)
}

/// Slope-restricted baseline on the ReLU rewrite of a MaxMin network.
pub fn certify_rr(model: &Model, config: &SolverConfig) -> Result<Certificate> {
    let started = Instant::now();
    solve_segments(BoundMethod::Rr, Norm::L2, vec![Segment::Sdp(assemble_rr(model)?)], config, started)
}

/// Feasibility of the DEQ well-posedness LMI; `bound` is NaN.
pub fn certify_deq_wellposed(model: &Model, config: &SolverConfig) -> Result<Certificate> {
    let started = Instant::now();
    let mut c =
        solve_segments(BoundMethod::NsrL2, Norm::L2, vec![Segment::Sdp(assemble_deq_wellposed(model)?)], config, started)?;
    c.bound = f64::NAN;
    Ok(c)
}

/// DEQ Lipschitz certificate; checks well-posedness first unless `waive` is set.
pub fn certify_deq(model: &Model, waive: bool, config: &SolverConfig) -> Result<(Option<Certificate>, Certificate)> {
    let started = Instant::now();
    let (pre, status) = if waive {
        (None, WellPosedness::Waived)
    } else {
        let c = certify_deq_wellposed(model, config)?;
        let status = if c.is_certified() { WellPosedness::Certified } else { WellPosedness::Unverified };
        (Some(c), status)
    };
    let problem = assemble_deq_lipschitz(model, status)?;
    Ok((pre, solve_segments(BoundMethod::NsrL2, Norm::L2, vec![Segment::Sdp(problem)], config, started)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActivationSpec;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn linear_model_bypasses_solver() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let m = Model::feedforward(vec![(w.clone(), DVector::zeros(2))], None).unwrap();
        let c = certify(&m, &CertifyOptions::default()).unwrap();
        assert_eq!(c.segments[0].iterations, 0);
        assert!((c.bound - sigma_max(&w)).abs() < 1e-14);
    }

    #[test]
    fn split_multiplies_segment_bounds() {
        let w1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 0.8]);
        let w2 = DMatrix::from_row_slice(2, 2, &[0.2, 1.1, 0.9, -0.4]);
        let w3 = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let m = Model::feedforward(
            vec![(w1, DVector::zeros(2)), (w2, DVector::zeros(2)), (w3, DVector::zeros(1))],
            Some(ActivationSpec::maxmin()),
        )
        .unwrap();
        let whole = certify(&m, &CertifyOptions::default()).unwrap();
        let split = certify(&m, &CertifyOptions { split: 2, ..Default::default() }).unwrap();
        assert_eq!(split.segments.len(), 2);
        assert!(whole.bound <= split.bound + 1e-7);
        assert!(certify(&m, &CertifyOptions { split: 4, ..Default::default() }).is_err());
        let linf = CertifyOptions { split: 2, norm: Norm::LinfL1, ..Default::default() };
        assert!(matches!(certify(&m, &linf), Err(LipError::Value(_))));
    }

    #[test]
    fn split_pieces_compose_to_model() {
        let m = Model::feedforward(
            vec![(eye(2) * 2.0, DVector::from_vec(vec![0.1, -0.2])), (eye(2), DVector::zeros(2)), (eye(2), DVector::zeros(2))],
            Some(ActivationSpec::maxmin()),
        )
        .unwrap();
        let parts = split_feedforward(&m, 2).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.7]);
        let mut y = x.clone();
        for p in &parts {
            y = p.forward(&y).unwrap();
        }
        assert!((y - m.forward(&x).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn deq_wellposedness_gates_lipschitz() {
        let m = Model::deq(
            crate::model::DeqParams {
                w: eye(2) * 2.0,
                u: eye(2),
                w_out: eye(2),
                b_z: DVector::zeros(2),
                b_y: DVector::zeros(2),
            },
            ActivationSpec::maxmin(),
        )
        .unwrap();
        assert!(matches!(certify_deq(&m, false, &SolverConfig::default()), Err(LipError::Precondition(_))));
    }
}
