//! Multiplier matrices `(T, S, P)` and quadratic-constraint blocks for
//! GroupSort and Householder activations, plus sampling-based verification.
//!
//! For inputs `x, y` and outputs `φ(x), φ(y)` every valid block satisfies
//! `[x-y; φ(x)-φ(y)]ᵀ X [x-y; φ(x)-φ(y)] >= 0` with
//! `X = [[T-2S, P+S], [P+S, -T-2P]]`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::activations::{self, check_unit};
use crate::error::{LipError, Result};
use crate::linalg::{asymmetry, block_diag, ones};
use crate::model::{ActivationKind, ActivationSpec};
use crate::rng::{chunk_rng, chunks, scaled_normal, standard_normal};

/// Which per-group structure matrix the multipliers scale.
#[derive(Debug, Clone, PartialEq)]
pub enum QcKind {
    /// `1 1ᵀ`
    GroupSort,
    /// `I - v vᵀ`
    Householder(DVector<f64>),
}

impl QcKind {
    /// QC family matching an activation. ReLU has none.
    pub fn for_activation(spec: &ActivationSpec) -> Result<Self> {
        match spec.kind {
            ActivationKind::GroupSort | ActivationKind::MaxMin | ActivationKind::FullSort => Ok(Self::GroupSort),
            ActivationKind::Householder => Ok(Self::Householder(
                spec.householder_v
                    .clone()
                    .ok_or_else(|| LipError::Value("householder activation needs v".into()))?,
            )),
            ActivationKind::Relu => Err(LipError::Unsupported(
                "ReLU is slope-restricted; use the slope-restricted constraint".into(),
            )),
        }
    }

    /// The `n_g x n_g` matrix multiplied by `γ`, `ν` and `τ`.
    pub fn structure(&self, group_size: usize) -> DMatrix<f64> {
        match self {
            Self::GroupSort => ones(group_size),
            Self::Householder(v) => DMatrix::identity(group_size, group_size) - v * v.transpose(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierParams {
    pub lambda: DVector<f64>,
    pub gamma: DVector<f64>,
    pub nu: DVector<f64>,
    pub tau: DVector<f64>,
    pub group_size: usize,
    pub kind: QcKind,
}

impl MultiplierParams {
    pub fn zeros(kind: QcKind, n_groups: usize, group_size: usize) -> Self {
        let z = DVector::zeros(n_groups);
        Self { lambda: z.clone(), gamma: z.clone(), nu: z.clone(), tau: z, group_size, kind }
    }

    pub fn n_groups(&self) -> usize {
        self.lambda.len()
    }

    pub fn dim(&self) -> usize {
        self.n_groups() * self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lambda.len();
        if self.gamma.len() != n || self.nu.len() != n || self.tau.len() != n {
            return Err(LipError::Dimension("multiplier vectors differ in length".into()));
        }
        if self.group_size == 0 {
            return Err(LipError::Dimension("group size must be positive".into()));
        }
        if let QcKind::Householder(v) = &self.kind {
            if v.len() != self.group_size {
                return Err(LipError::Dimension("householder v length differs from group size".into()));
            }
            check_unit(v)?;
        }
        if let Some(bad) = self.lambda.iter().find(|l| !(**l >= 0.0)) {
            return Err(LipError::Value(format!("lambda entries must be nonnegative, got {bad}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TspMatrices {
    pub t: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcBlock {
    pub x: DMatrix<f64>,
}

impl QcBlock {
    /// `[dx; dphi]ᵀ X [dx; dphi]`
    pub fn value(&self, dx: &DVector<f64>, dphi: &DVector<f64>) -> f64 {
        let n = dx.len();
        let x = &self.x;
        let a = x.view((0, 0), (n, n));
        let b = x.view((0, n), (n, n));
        let c = x.view((n, n), (n, n));
        dx.dot(&(a * dx)) + 2.0 * dx.dot(&(b * dphi)) + dphi.dot(&(c * dphi))
    }
}

pub fn build_tsp(params: &MultiplierParams) -> Result<TspMatrices> {
    params.validate()?;
    let ng = params.group_size;
    let eye = DMatrix::identity(ng, ng);
    let m = params.kind.structure(ng);
    let blocks = |f: &dyn Fn(usize) -> DMatrix<f64>| {
        block_diag(&(0..params.n_groups()).map(f).collect::<Vec<_>>())
    };
    Ok(TspMatrices {
        t: blocks(&|g| &eye * params.lambda[g] + &m * params.gamma[g]),
        s: blocks(&|g| &m * params.tau[g]),
        p: blocks(&|g| &m * params.nu[g]),
    })
}

fn assemble_x(tl: DMatrix<f64>, off: DMatrix<f64>, br: DMatrix<f64>) -> DMatrix<f64> {
    let n = tl.nrows();
    let mut x = DMatrix::zeros(2 * n, 2 * n);
    x.view_mut((0, 0), (n, n)).copy_from(&tl);
    x.view_mut((0, n), (n, n)).copy_from(&off);
    x.view_mut((n, 0), (n, n)).copy_from(&off.transpose());
    x.view_mut((n, n), (n, n)).copy_from(&br);
    x
}

pub fn qc_block(tsp: &TspMatrices) -> Result<QcBlock> {
    let n = tsp.t.nrows();
    for (name, m) in [("T", &tsp.t), ("S", &tsp.s), ("P", &tsp.p)] {
        if m.shape() != (n, n) {
            return Err(LipError::Dimension(format!("{name} is {:?}, expected {n}x{n}", m.shape())));
        }
    }
    let tl = &tsp.t - &tsp.s * 2.0;
    let off = &tsp.p + &tsp.s;
    let br = -&tsp.t - &tsp.p * 2.0;
    Ok(QcBlock { x: assemble_x(tl, off, br) })
}

/// `[[0, T], [T, -2T]]` for `[0, 1]`-slope-restricted activations with diagonal `T >= 0`.
pub fn qc_slope_restricted(t: &DMatrix<f64>) -> Result<QcBlock> {
    if !t.is_square() {
        return Err(LipError::Dimension("T must be square".into()));
    }
    let n = t.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && t[(i, j)] != 0.0 {
                return Err(LipError::Value("T must be diagonal".into()));
            }
        }
        if !(t[(i, i)] >= 0.0) {
            return Err(LipError::Value(format!("T diagonal must be nonnegative, got {}", t[(i, i)])));
        }
    }
    Ok(QcBlock { x: assemble_x(DMatrix::zeros(n, n), t.clone(), t * -2.0) })
}

/// Minimum sampled QC value with the pair attaining it.
#[derive(Debug, Clone)]
pub struct QcSample {
    pub min_value: f64,
    pub witness: (DVector<f64>, DVector<f64>),
    pub trials: usize,
}

const CHUNK: usize = 2048;

/// QC value normalized by `‖[x-y; φ(x)-φ(y)]‖²`.
pub fn normalized_qc_value(
    activation: &ActivationSpec,
    block: &QcBlock,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let dx = x - y;
    let dphi = activations::apply(activation, x)? - activations::apply(activation, y)?;
    let scale = dx.norm_squared() + dphi.norm_squared();
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(block.value(&dx, &dphi) / scale)
}

fn draw_pair(rng: &mut ChaCha8Rng, n: usize) -> (DVector<f64>, DVector<f64>) {
    let x = scaled_normal(rng, n, 1e-2, 1e2);
    let y = scaled_normal(rng, n, 1e-2, 1e2);
    (x, y)
}

fn reduce(parts: Vec<Result<QcSample>>, trials: usize, n: usize) -> Result<QcSample> {
    let mut best = QcSample {
        min_value: f64::INFINITY,
        witness: (DVector::zeros(n), DVector::zeros(n)),
        trials,
    };
    for part in parts {
        let part = part?;
        if part.min_value < best.min_value {
            best.min_value = part.min_value;
            best.witness = part.witness;
        }
    }
    Ok(best)
}

fn sample_min<F>(n: usize, trials: usize, seed: u64, eval: F) -> Result<QcSample>
where
    F: Fn(&mut ChaCha8Rng) -> Result<(f64, DVector<f64>, DVector<f64>)> + Sync,
{
    if trials == 0 {
        return Err(LipError::Value("trials must be at least 1".into()));
    }
    let parts: Vec<Result<QcSample>> = chunks(trials, CHUNK)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = chunk_rng(seed, idx);
            let mut best = QcSample {
                min_value: f64::INFINITY,
                witness: (DVector::zeros(n), DVector::zeros(n)),
                trials: len,
            };
            for _ in 0..len {
                let (v, x, y) = eval(&mut rng)?;
                if v < best.min_value {
                    best = QcSample { min_value: v, witness: (x, y), trials: len };
                }
            }
            Ok(best)
        })
        .collect();
    reduce(parts, trials, n)
}

/// Minimum normalized QC value of fixed multipliers over random input pairs.
/// Deterministic for a given seed regardless of thread count.
pub fn verify_qc_sample(
    activation: &ActivationSpec,
    params: &MultiplierParams,
    trials: usize,
    seed: u64,
) -> Result<QcSample> {
    let block = qc_block(&build_tsp(params)?)?;
    let n = params.dim();
    activation.check_width(n)?;
    sample_min(n, trials, seed, |rng| {
        let (x, y) = draw_pair(rng, n);
        let v = normalized_qc_value(activation, &block, &x, &y)?;
        Ok((v, x, y))
    })
}

/// Random multipliers for one trial: `λ ~ |N(0,1)|`, `γ, ν, τ ~ N(0,1)`.
pub fn random_params(rng: &mut ChaCha8Rng, kind: &QcKind, n_groups: usize, group_size: usize) -> MultiplierParams {
    MultiplierParams {
        lambda: standard_normal(rng, n_groups).abs(),
        gamma: standard_normal(rng, n_groups),
        nu: standard_normal(rng, n_groups),
        tau: standard_normal(rng, n_groups),
        group_size,
        kind: kind.clone(),
    }
}

/// Like [`verify_qc_sample`] but redraws the multipliers on every trial.
pub fn verify_qc_random(
    activation: &ActivationSpec,
    kind: &QcKind,
    n_groups: usize,
    trials: usize,
    seed: u64,
) -> Result<QcSample> {
    let ng = activation.group_size;
    let n = n_groups * ng;
    activation.check_width(n)?;
    sample_min(n, trials, seed, |rng| {
        let params = random_params(rng, kind, n_groups, ng);
        let block = qc_block(&build_tsp(&params)?)?;
        let (x, y) = draw_pair(rng, n);
        let v = normalized_qc_value(activation, &block, &x, &y)?;
        Ok((v, x, y))
    })
}

/// Random multipliers restricted to `λ = 0`; the QC then holds with equality.
pub fn verify_qc_equality(
    activation: &ActivationSpec,
    kind: &QcKind,
    n_groups: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let ng = activation.group_size;
    let n = n_groups * ng;
    activation.check_width(n)?;
    let parts: Vec<Result<f64>> = chunks(trials, CHUNK)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = chunk_rng(seed, idx);
            let mut worst = 0.0f64;
            for _ in 0..len {
                let mut params = random_params(&mut rng, kind, n_groups, ng);
                params.lambda.fill(0.0);
                let block = qc_block(&build_tsp(&params)?)?;
                let (x, y) = draw_pair(&mut rng, n);
                worst = worst.max(normalized_qc_value(activation, &block, &x, &y)?.abs());
            }
            Ok(worst)
        })
        .collect();
    parts.into_iter().try_fold(0.0f64, |acc, p| Ok(acc.max(p?)))
}

/// Symmetry defect of a block, for callers checking assembled constraints.
pub fn block_asymmetry(block: &QcBlock) -> f64 {
    asymmetry(&block.x)
}
