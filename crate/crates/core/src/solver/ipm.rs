//! Homogeneous self-dual primal-dual interior-point method with
//! Nesterov-Todd scaling and Mehrotra predictor-corrector steps.
//!
//! The problem `min cᵀz s.t. F0 + Σ z_k F_k ⪯ 0` is solved in the standard
//! dual form `max bᵀy s.t. C - Σ y_k A_k = S ⪰ 0` with `y = z`, `b = -c`,
//! `C = -F0`, `A_k = F_k`. Diagonal blocks are handled as linear cones.

use nalgebra::{DMatrix, DVector};

use super::{SolveStatus, SolverConfig};
use crate::error::{LipError, Result};
use crate::linalg::{lambda_min, symmetrize};
use crate::sdp::SdpProblem;

const STEP_FRACTION: f64 = 0.99;
/// Factor on the tolerances below which the recomputed residuals are checked.
const NEAR: f64 = 100.0;

pub(crate) struct IpmOutput {
    pub status: SolveStatus,
    pub z: DVector<f64>,
    /// Dual multiplier for every problem block (a certificate ray when infeasible).
    pub x_blocks: Vec<DMatrix<f64>>,
    pub iterations: usize,
}

struct PsdData {
    origin: usize,
    c: DMatrix<f64>,
    a: Vec<(usize, DMatrix<f64>)>,
}

struct Data {
    m: usize,
    b: DVector<f64>,
    psd: Vec<PsdData>,
    lp_c: DVector<f64>,
    lp_a: DMatrix<f64>,
    /// `(block, diagonal position)` of every linear-cone entry.
    lp_origin: Vec<(usize, usize)>,
    active: Vec<usize>,
}

#[derive(Clone)]
struct Point {
    xs: Vec<DMatrix<f64>>,
    ss: Vec<DMatrix<f64>>,
    xl: DVector<f64>,
    sl: DVector<f64>,
    y: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    xs: Vec<DMatrix<f64>>,
    ss: Vec<DMatrix<f64>>,
    xl: DVector<f64>,
    sl: DVector<f64>,
    y: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Scaling {
    l: DMatrix<f64>,
    linv: DMatrix<f64>,
    lam: DVector<f64>,
    w: DMatrix<f64>,
}

impl Data {
    fn build(problem: &SdpProblem) -> (Self, bool) {
        let mut used = vec![false; problem.num_vars];
        for block in &problem.blocks {
            for (k, _) in &block.terms {
                used[*k] = true;
            }
        }
        let mut free_direction = (0..problem.num_vars).any(|k| !used[k] && problem.objective[k] != 0.0);
        let candidates: Vec<usize> = (0..problem.num_vars).filter(|k| used[*k]).collect();
        let (active, inconsistent) = independent_vars(problem, &candidates);
        free_direction |= inconsistent;
        let mut index = vec![usize::MAX; problem.num_vars];
        for (i, k) in active.iter().enumerate() {
            index[*k] = i;
        }
        let m = active.len();
        let b = DVector::from_iterator(m, active.iter().map(|k| -problem.objective[*k]));

        let mut psd = Vec::new();
        let mut lp_c = Vec::new();
        let mut lp_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut lp_origin = Vec::new();
        for (bi, block) in problem.blocks.iter().enumerate() {
            if block.size == 1 || block.is_diagonal() {
                for d in 0..block.size {
                    lp_c.push(-block.f0[(d, d)]);
                    lp_rows.push(
                        block
                            .terms
                            .iter()
                            .filter(|(k, f)| index[*k] != usize::MAX && f[(d, d)] != 0.0)
                            .map(|(k, f)| (index[*k], f[(d, d)]))
                            .collect(),
                    );
                    lp_origin.push((bi, d));
                }
            } else {
                psd.push(PsdData {
                    origin: bi,
                    c: -&block.f0,
                    a: block
                        .terms
                        .iter()
                        .filter(|(k, _)| index[*k] != usize::MAX)
                        .map(|(k, f)| (index[*k], f.clone()))
                        .collect(),
                });
            }
        }
        let nl = lp_c.len();
        let mut lp_a = DMatrix::zeros(nl, m);
        for (r, row) in lp_rows.iter().enumerate() {
            for (k, v) in row {
                lp_a[(r, *k)] += v;
            }
        }
        let data = Self { m, b, psd, lp_c: DVector::from_vec(lp_c), lp_a, lp_origin, active };
        (data, free_direction)
    }

    fn nu(&self) -> f64 {
        (self.psd.iter().map(|p| p.c.nrows()).sum::<usize>() + self.lp_c.len()) as f64
    }

    fn a_op(&self, xs: &[DMatrix<f64>], xl: &DVector<f64>) -> DVector<f64> {
        let mut out = self.lp_a.transpose() * xl;
        for (p, x) in self.psd.iter().zip(xs) {
            for (k, a) in &p.a {
                out[*k] += a.dot(x);
            }
        }
        out
    }

    fn a_adj(&self, y: &DVector<f64>) -> (Vec<DMatrix<f64>>, DVector<f64>) {
        let mats = self
            .psd
            .iter()
            .map(|p| {
                let n = p.c.nrows();
                let mut m = DMatrix::zeros(n, n);
                for (k, a) in &p.a {
                    m += a * y[*k];
                }
                m
            })
            .collect();
        (mats, &self.lp_a * y)
    }

    fn c_inner(&self, xs: &[DMatrix<f64>], xl: &DVector<f64>) -> f64 {
        self.psd.iter().zip(xs).map(|(p, x)| p.c.dot(x)).sum::<f64>() + self.lp_c.dot(xl)
    }

    fn c_norm(&self) -> f64 {
        (self.psd.iter().map(|p| p.c.norm_squared()).sum::<f64>() + self.lp_c.norm_squared()).sqrt()
    }
}

/// Keeps a maximal linearly independent subset of the constraint matrices,
/// scanning in index order. Dropped variables are fixed at zero; the flag
/// reports a dropped variable whose objective coefficient is not reproduced
/// by the kept ones (the objective is then unbounded along that direction).
fn independent_vars(problem: &SdpProblem, candidates: &[usize]) -> (Vec<usize>, bool) {
    let n = problem.num_vars;
    let mut pos = vec![usize::MAX; n];
    for (i, k) in candidates.iter().enumerate() {
        pos[*k] = i;
    }
    let m = candidates.len();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for block in &problem.blocks {
        for (i, (ki, fi)) in block.terms.iter().enumerate() {
            for (kj, fj) in &block.terms[i..] {
                let v = fi.dot(fj);
                let (a, b) = (pos[*ki], pos[*kj]);
                gram[(a, b)] += v;
                if a != b {
                    gram[(b, a)] += v;
                }
            }
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    // Rows of the lower Cholesky factor of the kept Gram submatrix.
    let mut chol: Vec<Vec<f64>> = Vec::new();
    let mut inconsistent = false;
    for i in 0..m {
        let g: Vec<f64> = kept.iter().map(|j| gram[(*j, i)]).collect();
        let mut l = vec![0.0; kept.len()];
        for r in 0..kept.len() {
            let s: f64 = (0..r).map(|c| chol[r][c] * l[c]).sum();
            l[r] = (g[r] - s) / chol[r][r];
        }
        let resid = gram[(i, i)] - l.iter().map(|v| v * v).sum::<f64>();
        if resid > 1e-10 * gram[(i, i)] {
            let mut row = l;
            row.push(resid.sqrt());
            chol.push(row);
            kept.push(i);
        } else {
            let mut alpha = l;
            for r in (0..kept.len()).rev() {
                let s: f64 = (r + 1..kept.len()).map(|c| chol[c][r] * alpha[c]).sum();
                alpha[r] = (alpha[r] - s) / chol[r][r];
            }
            let c_k = problem.objective[candidates[i]];
            let implied: f64 = kept.iter().zip(&alpha).map(|(j, a)| a * problem.objective[candidates[*j]]).sum();
            if (c_k - implied).abs() > 1e-9 * (1.0 + c_k.abs()) {
                inconsistent = true;
            }
        }
    }
    (kept.into_iter().map(|i| candidates[i]).collect(), inconsistent)
}

fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = symmetrize(m);
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let n = m.nrows();
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = 1e-15;
    while eps <= 1e-10 {
        let shifted = &m + DMatrix::identity(n, n) * (eps * scale);
        if let Some(c) = shifted.cholesky() {
            return Ok(c.l());
        }
        eps *= 10.0;
    }
    Err(LipError::Numerical("iterate lost positive definiteness".into()))
}

fn nt_scaling(x: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<Scaling> {
    let n = x.nrows();
    let lx = cholesky_lower(x)?;
    let ls = cholesky_lower(s)?;
    let svd = (ls.transpose() * &lx).svd(false, true);
    let vt = svd.v_t.ok_or_else(|| LipError::Numerical("svd failed".into()))?;
    let lam = svd.singular_values;
    if lam.iter().any(|v| !(*v > 0.0)) {
        return Err(LipError::Numerical("degenerate scaling point".into()));
    }
    let lx_inv = lx
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| LipError::Numerical("singular cholesky factor".into()))?;
    let inv_sqrt = DMatrix::from_diagonal(&lam.map(|v| 1.0 / v.sqrt()));
    let sqrt = DMatrix::from_diagonal(&lam.map(f64::sqrt));
    let l = &lx * vt.transpose() * inv_sqrt;
    let linv = sqrt * &vt * lx_inv;
    let w = symmetrize(&(&l * l.transpose()));
    Ok(Scaling { l, linv, lam, w })
}

/// Solves the Schur system with two steps of iterative refinement.
fn solve_spd(
    schur: &DMatrix<f64>,
    chol: &Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    lu: &Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let once = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
        match (chol, lu) {
            (Some(c), _) => Some(c.solve(rhs)),
            (None, Some(lu)) => lu.solve(rhs),
            _ => None,
        }
    };
    let mut x = once(r).ok_or_else(|| LipError::Numerical("singular Schur complement".into()))?;
    for _ in 0..2 {
        let res = r - schur * &x;
        match once(&res) {
            Some(dx) if dx.iter().all(|v| v.is_finite()) => x += dx,
            _ => break,
        }
    }
    Ok(x)
}

/// Largest `α` keeping `Λ + α D ⪰ 0` for scaled diagonal `Λ`.
fn max_step_scaled(lam: &DVector<f64>, d: &DMatrix<f64>) -> f64 {
    let n = lam.len();
    let inv = lam.map(|v| 1.0 / v.sqrt());
    let mut m = d.clone();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= inv[i] * inv[j];
        }
    }
    let lo = lambda_min(&symmetrize(&m));
    if lo < 0.0 {
        -1.0 / lo
    } else {
        f64::INFINITY
    }
}

fn max_step_vec(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn max_step_scalar(x: f64, dx: f64) -> f64 {
    if dx < 0.0 {
        -x / dx
    } else {
        f64::INFINITY
    }
}

/// `accept` gives the final say on points that look optimal or infeasible.
pub(crate) fn run(
    problem: &SdpProblem,
    cfg: &SolverConfig,
    accept: &dyn Fn(SolveStatus, &DVector<f64>, &[DMatrix<f64>]) -> bool,
) -> Result<IpmOutput> {
    let (data, free_direction) = Data::build(problem);
    let m = data.m;
    let nl = data.lp_c.len();
    let nu = data.nu();
    let b_norm = data.b.norm();
    let c_norm = data.c_norm();

    let mut pt = Point {
        xs: data.psd.iter().map(|p| DMatrix::identity(p.c.nrows(), p.c.nrows())).collect(),
        ss: data.psd.iter().map(|p| DMatrix::identity(p.c.nrows(), p.c.nrows())).collect(),
        xl: DVector::from_element(nl, 1.0),
        sl: DVector::from_element(nl, 1.0),
        y: DVector::zeros(m),
        tau: 1.0,
        kappa: 1.0,
    };

    let finish = |pt: &Point, status: SolveStatus, iterations: usize| {
        let (scale_x, scale_y) = match status {
            SolveStatus::Infeasible => (-data.c_inner(&pt.xs, &pt.xl), pt.tau),
            SolveStatus::Unbounded => (pt.tau, data.b.dot(&pt.y)),
            _ => (pt.tau, pt.tau),
        };
        let mut z = DVector::zeros(problem.num_vars);
        for (i, k) in data.active.iter().enumerate() {
            z[*k] = pt.y[i] / scale_y;
        }
        let mut x_blocks: Vec<DMatrix<f64>> =
            problem.blocks.iter().map(|b| DMatrix::zeros(b.size, b.size)).collect();
        for (p, x) in data.psd.iter().zip(&pt.xs) {
            x_blocks[p.origin] = x / scale_x;
        }
        for (i, (bi, d)) in data.lp_origin.iter().enumerate() {
            x_blocks[*bi][(*d, *d)] = pt.xl[i] / scale_x;
        }
        let status = if status == SolveStatus::Optimal && free_direction {
            SolveStatus::Unbounded
        } else {
            status
        };
        IpmOutput { status, z, x_blocks, iterations }
    };

    let accepted = |out: &IpmOutput| match out.status {
        SolveStatus::Optimal | SolveStatus::Infeasible => accept(out.status, &out.z, &out.x_blocks),
        _ => true,
    };
    // Last point meeting the internal criteria but not the recomputed ones.
    let mut candidate: Option<IpmOutput> = None;

    for iter in 0..cfg.max_iters {
        // Residuals of the homogeneous embedding.
        let ax = data.a_op(&pt.xs, &pt.xl);
        let rp = &ax - &data.b * pt.tau;
        let (aty, aty_l) = data.a_adj(&pt.y);
        let rd: Vec<DMatrix<f64>> = data
            .psd
            .iter()
            .enumerate()
            .map(|(i, p)| &p.c * pt.tau - &aty[i] - &pt.ss[i])
            .collect();
        let rd_l = &data.lp_c * pt.tau - &aty_l - &pt.sl;
        let cx = data.c_inner(&pt.xs, &pt.xl);
        let by = data.b.dot(&pt.y);
        let rg = by - cx - pt.kappa;

        let rd_norm = (rd.iter().map(|r| r.norm_squared()).sum::<f64>() + rd_l.norm_squared()).sqrt();
        let pres = rp.norm() / pt.tau / (1.0 + b_norm);
        let dres = rd_norm / pt.tau / (1.0 + c_norm);
        let our_obj = -by / pt.tau;
        let gap = (cx - by).abs() / pt.tau;
        if !(pres.is_finite() && dres.is_finite() && gap.is_finite()) {
            return Ok(candidate.take().unwrap_or_else(|| finish(&pt, SolveStatus::NumericalError, iter)));
        }
        let internal = pres <= cfg.tol_feas && dres <= cfg.tol_feas && gap <= cfg.tol_gap * (1.0 + our_obj.abs());
        // Near the end the recomputed residuals decide, even if the embedding's lag slightly.
        let close = pres <= NEAR * cfg.tol_feas && dres <= NEAR * cfg.tol_feas && gap <= NEAR * cfg.tol_gap * (1.0 + our_obj.abs());
        if internal || close {
            let out = finish(&pt, SolveStatus::Optimal, iter);
            if accepted(&out) {
                return Ok(out);
            }
            if internal {
                candidate = Some(out);
            }
        }
        if cx < 0.0 && ax.norm() / (-cx) <= cfg.tol_feas {
            let out = finish(&pt, SolveStatus::Infeasible, iter);
            if accepted(&out) {
                return Ok(out);
            }
        }
        if by > 0.0 {
            let ray = (aty.iter().zip(&pt.ss).map(|(a, s)| (a + s).norm_squared()).sum::<f64>()
                + (&aty_l + &pt.sl).norm_squared())
            .sqrt();
            if ray / by <= cfg.tol_feas {
                return Ok(finish(&pt, SolveStatus::Unbounded, iter));
            }
        }

        let xs_inner: f64 = pt.xs.iter().zip(&pt.ss).map(|(x, s)| x.dot(s)).sum::<f64>() + pt.xl.dot(&pt.sl);
        let mu = (xs_inner + pt.tau * pt.kappa) / (nu + 1.0);

        // Scaling and Schur complement.
        let scalings = match pt
            .xs
            .iter()
            .zip(&pt.ss)
            .map(|(x, s)| nt_scaling(x, s))
            .collect::<Result<Vec<_>>>()
        {
            Ok(s) => s,
            Err(_) => return Ok(candidate.take().unwrap_or_else(|| finish(&pt, SolveStatus::NumericalError, iter))),
        };
        let wl = pt.xl.zip_map(&pt.sl, |x, s| (x / s).sqrt());
        let lam_l = pt.xl.zip_map(&pt.sl, |x, s| (x * s).sqrt());
        let wl2 = wl.map(|w| w * w);

        let mut schur = data.lp_a.transpose() * DMatrix::from_diagonal(&wl2) * &data.lp_a;
        // tr(A_i W A_j W) as a Gram matrix of Lᵀ A_i L, with W = L Lᵀ.
        for (p, sc) in data.psd.iter().zip(&scalings) {
            let g: Vec<(usize, DMatrix<f64>)> =
                p.a.iter().map(|(i, ai)| (*i, symmetrize(&(sc.l.transpose() * ai * &sc.l)))).collect();
            for (x, (i, gi)) in g.iter().enumerate() {
                for (j, gj) in &g[x..] {
                    let v = gi.dot(gj);
                    schur[(*i, *j)] += v;
                    if j != i {
                        schur[(*j, *i)] += v;
                    }
                }
            }
        }
        let schur = symmetrize(&schur);
        let chol = schur.clone().cholesky();
        let lu = if chol.is_none() { Some(schur.clone().lu()) } else { None };

        let wcw: Vec<DMatrix<f64>> = data.psd.iter().zip(&scalings).map(|(p, sc)| &sc.w * &p.c * &sc.w).collect();
        let wcw_l = data.lp_c.component_mul(&wl2);
        let a_vec = data.a_op(&wcw, &wcw_l);
        let cwc = data.c_inner(&wcw, &wcw_l);
        let wrw: Vec<DMatrix<f64>> = rd.iter().zip(&scalings).map(|(r, sc)| &sc.w * r * &sc.w).collect();
        let wrw_l = rd_l.component_mul(&wl2);
        let a_wrw = data.a_op(&wrw, &wrw_l);
        let c_wrw = data.c_inner(&wrw, &wrw_l);
        let b_minus_a = &data.b - &a_vec;
        let v = match solve_spd(&schur, &chol, &lu, &(&a_vec + &data.b)) {
            Ok(v) => v,
            Err(_) => return Ok(candidate.take().unwrap_or_else(|| finish(&pt, SolveStatus::NumericalError, iter))),
        };
        let denom_base = b_minus_a.dot(&v) + cwc + pt.kappa / pt.tau;

        // Computes the search direction for scaled complementarity targets.
        let direction = |rhs: &[DMatrix<f64>], rhs_l: &DVector<f64>, r_tk: f64, eta: f64| -> Result<Direction> {
            let rc: Vec<DMatrix<f64>> = rhs
                .iter()
                .zip(&scalings)
                .map(|(r, sc)| {
                    let n = sc.lam.len();
                    let u = DMatrix::from_fn(n, n, |i, j| 2.0 * r[(i, j)] / (sc.lam[i] + sc.lam[j]));
                    symmetrize(&(&sc.l * u * sc.l.transpose()))
                })
                .collect();
            let rc_l = DVector::from_fn(nl, |i, _| wl[i] * rhs_l[i] / lam_l[i]);
            let r1 = -&rp * eta - data.a_op(&rc, &rc_l) + &a_wrw * eta;
            let u = solve_spd(&schur, &chol, &lu, &r1)?;
            let r2 = -eta * rg + data.c_inner(&rc, &rc_l) - eta * c_wrw + r_tk / pt.tau;
            let dtau = (r2 - b_minus_a.dot(&u)) / denom_base;
            let dy = &u + &v * dtau;
            let (ady, ady_l) = data.a_adj(&dy);
            let dss: Vec<DMatrix<f64>> = data
                .psd
                .iter()
                .enumerate()
                .map(|(i, p)| symmetrize(&(&p.c * dtau - &ady[i] + &rd[i] * eta)))
                .collect();
            let dsl = &data.lp_c * dtau - &ady_l + &rd_l * eta;
            let dxs: Vec<DMatrix<f64>> = rc
                .iter()
                .zip(&dss)
                .zip(&scalings)
                .map(|((r, ds), sc)| symmetrize(&(r - &sc.w * ds * &sc.w)))
                .collect();
            let dxl = &rc_l - dsl.component_mul(&wl2);
            let dkappa = (r_tk - pt.kappa * dtau) / pt.tau;
            Ok(Direction { xs: dxs, ss: dss, xl: dxl, sl: dsl, y: dy, tau: dtau, kappa: dkappa })
        };

        let scaled = |d: &Direction| -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DVector<f64>, DVector<f64>) {
            let dxt = d.xs.iter().zip(&scalings).map(|(dx, sc)| &sc.linv * dx * sc.linv.transpose()).collect();
            let dst = d.ss.iter().zip(&scalings).map(|(ds, sc)| sc.l.transpose() * ds * &sc.l).collect();
            let dxl = d.xl.component_div(&wl);
            let dsl = d.sl.component_mul(&wl);
            (dxt, dst, dxl, dsl)
        };

        let step_length = |d: &Direction, dxt: &[DMatrix<f64>], dst: &[DMatrix<f64>]| -> f64 {
            let mut alpha = f64::INFINITY;
            for ((sc, dx), ds) in scalings.iter().zip(dxt).zip(dst) {
                alpha = alpha.min(max_step_scaled(&sc.lam, dx)).min(max_step_scaled(&sc.lam, ds));
            }
            alpha
                .min(max_step_vec(&pt.xl, &d.xl))
                .min(max_step_vec(&pt.sl, &d.sl))
                .min(max_step_scalar(pt.tau, d.tau))
                .min(max_step_scalar(pt.kappa, d.kappa))
        };

        // Predictor.
        let rhs_aff: Vec<DMatrix<f64>> = scalings.iter().map(|sc| -DMatrix::from_diagonal(&sc.lam.map(|v| v * v))).collect();
        let rhs_aff_l = -lam_l.map(|v| v * v);
        let aff = match direction(&rhs_aff, &rhs_aff_l, -pt.tau * pt.kappa, 1.0) {
            Ok(d) => d,
            Err(_) => return Ok(candidate.take().unwrap_or_else(|| finish(&pt, SolveStatus::NumericalError, iter))),
        };
        let (dxt_a, dst_a, dxl_a, dsl_a) = scaled(&aff);
        let alpha_aff = step_length(&aff, &dxt_a, &dst_a).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);
        let eta = 1.0 - sigma;

        // Corrector.
        let rhs: Vec<DMatrix<f64>> = scalings
            .iter()
            .zip(dxt_a.iter().zip(&dst_a))
            .map(|(sc, (dx, ds))| {
                let n = sc.lam.len();
                let prod = dx * ds;
                let sym = (&prod + prod.transpose()) * 0.5;
                DMatrix::identity(n, n) * (sigma * mu) - DMatrix::from_diagonal(&sc.lam.map(|v| v * v)) - sym
            })
            .collect();
        let rhs_l = DVector::from_fn(nl, |i, _| sigma * mu - lam_l[i] * lam_l[i] - dxl_a[i] * dsl_a[i]);
        let r_tk = sigma * mu - pt.tau * pt.kappa - aff.tau * aff.kappa;
        let dir = match direction(&rhs, &rhs_l, r_tk, eta) {
            Ok(d) => d,
            Err(_) => return Ok(candidate.take().unwrap_or_else(|| finish(&pt, SolveStatus::NumericalError, iter))),
        };
        let (dxt, dst, _, _) = scaled(&dir);
        let alpha = (STEP_FRACTION * step_length(&dir, &dxt, &dst)).min(1.0);
        if !(alpha > 1e-14) {
            return Ok(candidate.take().unwrap_or_else(|| finish(&pt, SolveStatus::NumericalError, iter)));
        }

        for (x, dx) in pt.xs.iter_mut().zip(&dir.xs) {
            *x = symmetrize(&(&*x + dx * alpha));
        }
        for (s, ds) in pt.ss.iter_mut().zip(&dir.ss) {
            *s = symmetrize(&(&*s + ds * alpha));
        }
        pt.xl += &dir.xl * alpha;
        pt.sl += &dir.sl * alpha;
        pt.y += &dir.y * alpha;
        pt.tau += dir.tau * alpha;
        pt.kappa += dir.kappa * alpha;
    }
    Ok(candidate.unwrap_or_else(|| finish(&pt, SolveStatus::MaxIterations, cfg.max_iters)))
}
