//! Reference bounds: weight-norm product, sampled lower bounds, exhaustive
//! activation-pattern search and norm-equivalence conversion.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{LipError, Result};
use crate::linalg::{block_diag, sigma_max};
use crate::model::{ActivationKind, ActivationSpec, Architecture, Model};
use crate::rng::{chunk_rng, chunks, scaled_normal};

pub const DEFAULT_SAMPLES: usize = 200_000;
pub const FGL_LIMIT: u128 = 10_000_000;
const SAMPLE_CHUNK: usize = 4096;
const SAMPLE_RADIUS: (f64, f64) = (1e-1, 1e1);
const POWER_MAX_ITERS: usize = 10_000;
const SVD_MAX_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundMethod {
    Mp,
    Sample,
    Fgl,
    NormEq,
    NsrL2,
    NsrLinf,
    Rr,
}

impl BoundMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mp => "mp",
            Self::Sample => "sample",
            Self::Fgl => "fgl",
            Self::NormEq => "norm-eq",
            Self::NsrL2 => "nsr-l2",
            Self::NsrLinf => "nsr-linf",
            Self::Rr => "rr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mp" => Ok(Self::Mp),
            "sample" => Ok(Self::Sample),
            "fgl" => Ok(Self::Fgl),
            "norm-eq" => Ok(Self::NormEq),
            "nsr-l2" => Ok(Self::NsrL2),
            "nsr-linf" => Ok(Self::NsrLinf),
            "rr" => Ok(Self::Rr),
            _ => Err(LipError::Value(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    L2,
    /// `|f(x) - f(y)| <= L ||x - y||_inf` for scalar outputs.
    LinfL1,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::LinfL1 => "linf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Self::L2),
            "linf" | "linf-l1" => Ok(Self::LinfL1),
            _ => Err(LipError::Value(format!("unknown norm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub method: BoundMethod,
    pub value: f64,
    pub norm: Norm,
    pub runtime_seconds: f64,
    /// Sampled values bound the constant from below; everything else from above.
    pub lower_bound: bool,
    pub metadata: BTreeMap<String, Value>,
}

impl BoundReport {
    pub fn new(method: BoundMethod, norm: Norm, value: f64, started: Instant) -> Self {
        Self {
            method,
            value,
            norm,
            runtime_seconds: started.elapsed().as_secs_f64(),
            lower_bound: method == BoundMethod::Sample,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }

    /// JSON object; non-finite values become `null`.
    pub fn to_json(&self, reproducible: bool) -> Value {
        json!({
            "method": self.method.name(),
            "norm": self.norm.name(),
            "value": finite_or_null(self.value),
            "runtime_seconds": if reproducible { 0.0 } else { self.runtime_seconds },
            "lower_bound": self.lower_bound,
            "metadata": self.metadata,
        })
    }
}

pub fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// Largest singular value: full SVD for small matrices, otherwise power
/// iteration on `WᵀW` from a fixed start until the relative change is below `tol`.
pub fn spectral_norm(w: &DMatrix<f64>, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(LipError::Value("tolerance must be positive".into()));
    }
    if w.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    if w.nrows().max(w.ncols()) <= SVD_MAX_DIM {
        return Ok(sigma_max(w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut v = crate::rng::unit_vector(&mut rng, w.ncols());
    let mut prev = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let u = w * &v;
        let next = w.transpose() * &u;
        let sigma = u.norm();
        let n = next.norm();
        if n == 0.0 {
            return Ok(sigma);
        }
        v = next / n;
        if (sigma - prev).abs() <= tol * sigma {
            return Ok(sigma);
        }
        prev = sigma;
    }
    Err(LipError::Convergence(format!("power iteration did not reach {tol} in {POWER_MAX_ITERS} steps")))
}

const NORM_TOL: f64 = 1e-12;

/// Product of per-layer weight norms; residual layers contribute `1 + ‖G‖‖W‖`.
pub fn mp_bound(model: &Model) -> Result<BoundReport> {
    let started = Instant::now();
    let value = match model.arch {
        Architecture::Feedforward | Architecture::Residual => {
            let mut prod = 1.0;
            for layer in &model.layers {
                let w = spectral_norm(&layer.weight, NORM_TOL)?;
                prod *= match (&layer.activation, &layer.residual) {
                    (Some(_), Some(g)) => 1.0 + spectral_norm(g, NORM_TOL)? * w,
                    _ => w,
                };
            }
            prod
        }
        Architecture::SingleLayerResidual => {
            let p = model.single_res.as_ref().expect("validated");
            spectral_norm(&p.h1, NORM_TOL)? + spectral_norm(&p.g1, NORM_TOL)? * spectral_norm(&p.w1, NORM_TOL)?
        }
        other => return Err(LipError::Unsupported(format!("no weight-product bound for {other:?} models"))),
    };
    Ok(BoundReport::new(BoundMethod::Mp, Norm::L2, value, started))
}

fn jacobian_norm(j: &DMatrix<f64>, norm: Norm) -> f64 {
    match norm {
        Norm::L2 => sigma_max(j),
        Norm::LinfL1 => j.row(0).iter().map(|v| v.abs()).sum(),
    }
}

fn require_scalar(model: &Model, norm: Norm) -> Result<()> {
    if norm == Norm::LinfL1 && model.output_dim() != 1 {
        return Err(LipError::Value(format!(
            "the linf bound needs a scalar output; select one of the {} outputs first",
            model.output_dim()
        )));
    }
    Ok(())
}

/// Maximum Jacobian norm over random inputs (a lower bound on the constant).
pub fn sample_lower_bound(model: &Model, norm: Norm, n_samples: usize, seed: u64) -> Result<BoundReport> {
    if !model.arch.is_explicit() {
        return Err(LipError::Unsupported(
            "implicit models have no exact Jacobian; use pair_ratio_lower_bound".into(),
        ));
    }
    if n_samples == 0 {
        return Err(LipError::Value("n_samples must be positive".into()));
    }
    require_scalar(model, norm)?;
    let started = Instant::now();
    let n0 = model.input_dim();
    let per_chunk: Vec<Result<f64>> = chunks(n_samples, SAMPLE_CHUNK)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = chunk_rng(seed, idx);
            let mut best = 0.0f64;
            for _ in 0..len {
                let x = scaled_normal(&mut rng, n0, SAMPLE_RADIUS.0, SAMPLE_RADIUS.1);
                best = best.max(jacobian_norm(&model.jacobian(&x)?, norm));
            }
            Ok(best)
        })
        .collect();
    let mut value = 0.0f64;
    for v in per_chunk {
        value = value.max(v?);
    }
    Ok(BoundReport::new(BoundMethod::Sample, norm, value, started)
        .with("samples", json!(n_samples))
        .with("seed", json!(seed))
        .with("estimator", json!("jacobian")))
}

/// Maximum difference quotient over random input pairs; works for every architecture.
pub fn pair_ratio_lower_bound(model: &Model, norm: Norm, n_pairs: usize, seed: u64) -> Result<BoundReport> {
    if n_pairs == 0 {
        return Err(LipError::Value("n_pairs must be positive".into()));
    }
    require_scalar(model, norm)?;
    let started = Instant::now();
    let n0 = model.input_dim();
    let per_chunk: Vec<Result<f64>> = chunks(n_pairs, SAMPLE_CHUNK)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = chunk_rng(seed, idx);
            let mut best = 0.0f64;
            for _ in 0..len {
                let x = scaled_normal(&mut rng, n0, SAMPLE_RADIUS.0, SAMPLE_RADIUS.1);
                let d = scaled_normal(&mut rng, n0, 1e-3, 1.0);
                let df = model.forward(&(&x + &d))? - model.forward(&x)?;
                let ratio = match norm {
                    Norm::L2 => df.norm() / d.norm(),
                    Norm::LinfL1 => df[0].abs() / d.amax(),
                };
                if ratio.is_finite() {
                    best = best.max(ratio);
                }
            }
            Ok(best)
        })
        .collect();
    let mut value = 0.0f64;
    for v in per_chunk {
        value = value.max(v?);
    }
    Ok(BoundReport::new(BoundMethod::Sample, norm, value, started)
        .with("samples", json!(n_pairs))
        .with("seed", json!(seed))
        .with("estimator", json!("pairs")))
}

/// Every possible Jacobian of one activation group.
fn group_factors(act: &ActivationSpec) -> Result<Vec<DMatrix<f64>>> {
    let n = act.group_size;
    match act.kind {
        ActivationKind::GroupSort | ActivationKind::MaxMin | ActivationKind::FullSort => {
            let mut perms = Vec::new();
            permutations(&mut (0..n).collect::<Vec<_>>(), 0, &mut perms);
            Ok(perms
                .into_iter()
                .map(|p| {
                    let mut m = DMatrix::zeros(n, n);
                    for (r, c) in p.into_iter().enumerate() {
                        m[(r, c)] = 1.0;
                    }
                    m
                })
                .collect())
        }
        ActivationKind::Householder => {
            let v = act.householder_v.as_ref().expect("validated");
            Ok(vec![DMatrix::identity(n, n), crate::activations::householder_reflection(v)])
        }
        ActivationKind::Relu => Err(LipError::Unsupported("pattern search covers sorting and Householder activations".into())),
    }
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

/// Exact maximum of `‖W_l D_{l-1} ⋯ D_1 W_1‖` over every per-group activation
/// Jacobian `D_i`, feasible or not.
pub fn fgl_bound(model: &Model, norm: Norm) -> Result<BoundReport> {
    if model.arch != Architecture::Feedforward {
        return Err(LipError::Unsupported(format!("pattern search needs a feedforward model, got {:?}", model.arch)));
    }
    require_scalar(model, norm)?;
    let started = Instant::now();
    let factors = match &model.activation {
        Some(act) if !model.hidden_widths().is_empty() => group_factors(act)?,
        _ => Vec::new(),
    };
    let radix = factors.len().max(1) as u128;
    // One digit per activation group, in layer order.
    let mut digits = 0usize;
    for w in model.hidden_widths() {
        digits += w / model.activation.as_ref().map_or(1, |a| a.group_size);
    }
    let mut total: u128 = 1;
    for _ in 0..digits {
        total = total.saturating_mul(radix);
        if total > FGL_LIMIT {
            return Err(LipError::TooLarge(format!(
                "{radix}^{digits} activation patterns exceed the limit of {FGL_LIMIT}"
            )));
        }
    }
    let total = total as usize;
    let eval = |mut index: usize| -> f64 {
        let mut j: Option<DMatrix<f64>> = None;
        for layer in &model.layers {
            let mut local = layer.weight.clone();
            if layer.activation.is_some() {
                let groups = layer.weight.nrows() / factors[0].nrows();
                let blocks: Vec<DMatrix<f64>> = (0..groups)
                    .map(|_| {
                        let f = factors[index % factors.len()].clone();
                        index /= factors.len();
                        f
                    })
                    .collect();
                local = block_diag(&blocks) * local;
            }
            j = Some(match j {
                Some(prev) => local * prev,
                None => local,
            });
        }
        jacobian_norm(&j.expect("validated"), norm)
    };
    let value = chunks(total, 1024)
        .into_par_iter()
        .map(|(idx, len)| {
            let start = idx as usize * 1024;
            (start..start + len).map(eval).fold(0.0f64, f64::max)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0f64, f64::max);
    let mut report = BoundReport::new(BoundMethod::Fgl, norm, value, started).with("patterns", json!(total));
    if model.activation.as_ref().is_some_and(|a| a.kind == ActivationKind::Householder) {
        report = report.with("extension", json!("householder branches"));
    }
    Ok(report)
}

/// `√n0 · l2_bound`, an ℓ∞→ℓ1 bound for scalar outputs.
pub fn norm_eq_bound(l2_bound: f64, n0: usize) -> Result<BoundReport> {
    if !(l2_bound >= 0.0) {
        return Err(LipError::Value("l2 bound must be nonnegative".into()));
    }
    let started = Instant::now();
    Ok(BoundReport::new(BoundMethod::NormEq, Norm::LinfL1, (n0 as f64).sqrt() * l2_bound, started)
        .with("l2_bound", json!(l2_bound))
        .with("input_dim", json!(n0)))
}

/// Largest Lipschitz ratio over a uniform grid of input pairs in `[-r, r]^n0`;
/// only sensible for tiny inputs.
pub fn grid_ratio(model: &Model, norm: Norm, points_per_axis: usize, radius: f64) -> Result<f64> {
    require_scalar(model, norm)?;
    let n0 = model.input_dim();
    let total = points_per_axis.checked_pow(n0 as u32).ok_or_else(|| LipError::TooLarge("grid too large".into()))?;
    let step = 2.0 * radius / (points_per_axis - 1) as f64;
    let points: Vec<DVector<f64>> = (0..total)
        .map(|mut i| {
            DVector::from_fn(n0, |_, _| {
                let c = i % points_per_axis;
                i /= points_per_axis;
                -radius + step * c as f64
            })
        })
        .collect();
    let values: Vec<DVector<f64>> = points.iter().map(|x| model.forward(x)).collect::<Result<_>>()?;
    let best = (0..total)
        .into_par_iter()
        .map(|a| {
            let mut best = 0.0f64;
            for b in a + 1..total {
                let dx = &points[b] - &points[a];
                let df = &values[b] - &values[a];
                let r = match norm {
                    Norm::L2 => df.norm() / dx.norm(),
                    Norm::LinfL1 => df[0].abs() / dx.amax(),
                };
                best = best.max(r);
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0f64, f64::max);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn net(w1: DMatrix<f64>, w2: DMatrix<f64>) -> Model {
        let (n1, n2) = (w1.nrows(), w2.nrows());
        Model::feedforward(vec![(w1, DVector::zeros(n1)), (w2, DVector::zeros(n2))], Some(ActivationSpec::maxmin()))
            .unwrap()
    }

    #[test]
    fn spectral_norm_small_cases() {
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        assert!((spectral_norm(&d, 1e-12).unwrap() - 3.0).abs() < 1e-12);
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!((spectral_norm(&n, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 3), 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn power_iteration_on_large_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DMatrix::from_fn(40, 50, |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5);
        let s = spectral_norm(&w, 1e-13).unwrap();
        assert!((s - sigma_max(&w)).abs() <= 1e-8 * s);
    }

    #[test]
    fn mp_examples() {
        let m = Model::feedforward(
            vec![(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1)), (DMatrix::from_element(1, 1, 3.0), DVector::zeros(1))],
            Some(ActivationSpec::groupsort(1)),
        )
        .unwrap();
        assert!((mp_bound(&m).unwrap().value - 6.0).abs() < 1e-12);
        let res = Model::residual(
            vec![
                Layer { weight: eye(2), bias: DVector::zeros(2), activation: None, residual: Some(eye(2)) },
                Layer::affine(eye(2), DVector::zeros(2)),
            ],
            ActivationSpec::maxmin(),
        )
        .unwrap();
        assert!((mp_bound(&res).unwrap().value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sample_examples() {
        let r = sample_lower_bound(&net(eye(2), eye(2)), Norm::L2, 500, 1).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        assert!(r.lower_bound);
        let lin = Model::feedforward(vec![(DMatrix::from_row_slice(1, 2, &[3.0, -4.0]), DVector::zeros(1))], None).unwrap();
        assert!((sample_lower_bound(&lin, Norm::LinfL1, 10, 1).unwrap().value - 7.0).abs() < 1e-12);
        assert!(matches!(sample_lower_bound(&net(eye(2), eye(2)), Norm::LinfL1, 10, 1), Err(LipError::Value(_))));
    }

    #[test]
    fn sample_is_deterministic() {
        let m = net(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, -1.0]), DMatrix::from_row_slice(1, 2, &[0.5, 2.0]));
        let a = sample_lower_bound(&m, Norm::L2, 9000, 5).unwrap().value;
        let b = sample_lower_bound(&m, Norm::L2, 9000, 5).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn fgl_examples() {
        let a = fgl_bound(&net(eye(2), DMatrix::from_row_slice(1, 2, &[1.0, 0.0])), Norm::L2).unwrap();
        assert!((a.value - 1.0).abs() < 1e-12);
        assert_eq!(a.metadata["patterns"], json!(2));
        let b = fgl_bound(&net(eye(2), DMatrix::from_row_slice(1, 2, &[1.0, 1.0])), Norm::L2).unwrap();
        assert!((b.value - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fgl_guard() {
        let w = DMatrix::identity(64, 64);
        let m = Model::feedforward(
            vec![(w.clone(), DVector::zeros(64)), (w, DVector::zeros(64))],
            Some(ActivationSpec::maxmin()),
        )
        .unwrap();
        assert!(matches!(fgl_bound(&m, Norm::L2), Err(LipError::TooLarge(_))));
    }

    #[test]
    fn norm_eq_examples() {
        assert_eq!(norm_eq_bound(1.0, 4).unwrap().value, 2.0);
        assert_eq!(norm_eq_bound(0.0, 9).unwrap().value, 0.0);
        assert!(norm_eq_bound(-1.0, 2).is_err());
    }
}
