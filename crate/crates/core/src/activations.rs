//! GroupSort, Householder and ReLU activations, their Jacobian factors, and the
//! residual-ReLU form of MaxMin.
//!
//! Sorting is descending within each group so that a group of two maps to
//! `[max, min]`. Ties keep the original index order.

use nalgebra::{DMatrix, DVector};

use crate::error::{LipError, Result};
use crate::linalg::block_diag;
use crate::model::{ActivationKind, ActivationSpec};

const UNIT_TOL: f64 = 1e-12;

fn check_groups(len: usize, group_size: usize) -> Result<usize> {
    if group_size == 0 || len % group_size != 0 {
        return Err(LipError::Dimension(format!(
            "group size {group_size} does not divide width {len}"
        )));
    }
    Ok(len / group_size)
}

pub(crate) fn check_unit(v: &DVector<f64>) -> Result<()> {
    if !v.iter().all(|x| x.is_finite()) || (v.norm() - 1.0).abs() > UNIT_TOL {
        return Err(LipError::Value(format!(
            "householder vector must have unit norm, got {}",
            v.norm()
        )));
    }
    Ok(())
}

/// Permutation `perm` such that `groupsort(x)[k] == x[perm[k]]`.
pub fn group_sort_permutation(x: &DVector<f64>, group_size: usize) -> Result<Vec<usize>> {
    let groups = check_groups(x.len(), group_size)?;
    let mut perm = Vec::with_capacity(x.len());
    for g in 0..groups {
        let base = g * group_size;
        let mut idx: Vec<usize> = (base..base + group_size).collect();
        // stable: equal entries keep their original order
        idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
        perm.extend(idx);
    }
    Ok(perm)
}

pub fn groupsort(x: &DVector<f64>, group_size: usize) -> Result<DVector<f64>> {
    let perm = group_sort_permutation(x, group_size)?;
    Ok(DVector::from_iterator(x.len(), perm.iter().map(|&i| x[i])))
}

/// `I - 2 v v^T`.
pub fn householder_reflection(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::identity(n, n) - (v * v.transpose()) * 2.0
}

/// Whether each group takes the reflection branch (`v^T x_g <= 0`).
pub fn householder_branches(x: &DVector<f64>, group_size: usize, v: &DVector<f64>) -> Result<Vec<bool>> {
    let groups = check_groups(x.len(), group_size)?;
    if v.len() != group_size {
        return Err(LipError::Dimension(format!(
            "householder vector has length {}, group size is {group_size}",
            v.len()
        )));
    }
    check_unit(v)?;
    Ok((0..groups)
        .map(|g| v.dot(&x.rows(g * group_size, group_size)) <= 0.0)
        .collect())
}

pub fn householder(x: &DVector<f64>, group_size: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
    let branches = householder_branches(x, group_size, v)?;
    let mut out = x.clone();
    for (g, reflect) in branches.into_iter().enumerate() {
        if reflect {
            let mut seg = out.rows_mut(g * group_size, group_size);
            let proj = v.dot(&seg);
            seg -= v * (2.0 * proj);
        }
    }
    Ok(out)
}

pub fn relu(x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| v.max(0.0))
}

/// Applies `spec` entrywise/groupwise to `x`.
pub fn apply(spec: &ActivationSpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    match spec.kind {
        ActivationKind::Relu => Ok(relu(x)),
        ActivationKind::GroupSort | ActivationKind::MaxMin | ActivationKind::FullSort => {
            groupsort(x, spec.group_size)
        }
        ActivationKind::Householder => {
            let v = spec
                .householder_v
                .as_ref()
                .ok_or_else(|| LipError::Value("householder activation without v".into()))?;
            householder(x, spec.group_size, v)
        }
    }
}

/// Jacobian of the activation at `x`: a block permutation for GroupSort,
/// `I` or `I - 2vv^T` per group for Householder, a 0/1 diagonal for ReLU.
pub fn jacobian_factor(spec: &ActivationSpec, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = x.len();
    match spec.kind {
        ActivationKind::Relu => Ok(DMatrix::from_diagonal(&x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))),
        ActivationKind::GroupSort | ActivationKind::MaxMin | ActivationKind::FullSort => {
            let perm = group_sort_permutation(x, spec.group_size)?;
            let mut j = DMatrix::zeros(n, n);
            for (row, &col) in perm.iter().enumerate() {
                j[(row, col)] = 1.0;
            }
            Ok(j)
        }
        ActivationKind::Householder => {
            let v = spec
                .householder_v
                .as_ref()
                .ok_or_else(|| LipError::Value("householder activation without v".into()))?;
            let reflection = householder_reflection(v);
            let eye = DMatrix::identity(spec.group_size, spec.group_size);
            let blocks: Vec<DMatrix<f64>> = householder_branches(x, spec.group_size, v)?
                .into_iter()
                .map(|r| if r { reflection.clone() } else { eye.clone() })
                .collect();
            Ok(block_diag(&blocks))
        }
    }
}

/// MaxMin written as `H x + G relu(W x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReluRewrite {
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl ResidualReluRewrite {
    pub fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.g * relu(&(&self.w * x))
    }
}

/// Block-diagonal lift of the 2x2 construction to an even `width`.
pub fn maxmin_to_residual_relu(width: usize) -> Result<ResidualReluRewrite> {
    if width == 0 || width % 2 != 0 {
        return Err(LipError::Dimension(format!(
            "MaxMin rewrite needs an even width, got {width}"
        )));
    }
    let eye = DMatrix::<f64>::identity(width / 2, width / 2);
    let h = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    let w = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
    Ok(ResidualReluRewrite {
        h: eye.kronecker(&h),
        g: eye.kronecker(&g),
        w: eye.kronecker(&w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{chunk_rng, scaled_normal, unit_vector};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn maxmin_v() -> DVector<f64> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        dv(&[h, -h])
    }

    #[test]
    fn groupsort_examples() {
        assert_eq!(groupsort(&dv(&[1.0, 2.0]), 2).unwrap(), dv(&[2.0, 1.0]));
        assert_eq!(groupsort(&dv(&[3.0, 1.0, 4.0, 2.0]), 2).unwrap(), dv(&[3.0, 1.0, 4.0, 2.0]));
        assert_eq!(groupsort(&dv(&[1.0, 2.0, 3.0, 4.0]), 4).unwrap(), dv(&[4.0, 3.0, 2.0, 1.0]));
        assert!(matches!(groupsort(&dv(&[1.0, 2.0, 3.0]), 2), Err(LipError::Dimension(_))));
    }

    #[test]
    fn householder_examples() {
        let v = maxmin_v();
        let out = householder(&dv(&[0.0, 1.0]), 2, &v).unwrap();
        assert!((out - dv(&[1.0, 0.0])).norm() < 1e-15);
        assert_eq!(householder(&dv(&[1.0, 0.0]), 2, &v).unwrap(), dv(&[1.0, 0.0]));
        let out = householder(&dv(&[1.0, 1.0]), 2, &v).unwrap();
        assert!((out - dv(&[1.0, 1.0])).norm() < 1e-15);
        assert!(matches!(
            householder(&dv(&[1.0, 1.0]), 2, &dv(&[1.0, 1.0])),
            Err(LipError::Value(_))
        ));
    }

    #[test]
    fn householder_with_maxmin_vector_is_maxmin() {
        let v = maxmin_v();
        let mut rng = chunk_rng(3, 0);
        for _ in 0..1000 {
            let x = scaled_normal(&mut rng, 6, 0.1, 10.0);
            let a = householder(&x, 2, &v).unwrap();
            let b = groupsort(&x, 2).unwrap();
            assert!((a - b).norm() <= 1e-12 * x.norm().max(1.0));
        }
    }

    #[test]
    fn rewrite_matches_explicit_blocks() {
        let r = maxmin_to_residual_relu(2).unwrap();
        assert_eq!(r.h, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]));
        assert_eq!(r.g, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        assert_eq!(r.w, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(r.evaluate(&dv(&[1.0, 2.0])), dv(&[2.0, 1.0]));

        let r4 = maxmin_to_residual_relu(4).unwrap();
        assert_eq!(r4.h.view((2, 2), (2, 2)), r.h);
        assert_eq!(r4.h.view((0, 2), (2, 2)), DMatrix::<f64>::zeros(2, 2));
        assert!(matches!(maxmin_to_residual_relu(3), Err(LipError::Dimension(_))));
    }

    #[test]
    fn rewrite_equivalence_sampled() {
        let r = maxmin_to_residual_relu(6).unwrap();
        let mut rng = chunk_rng(11, 0);
        for _ in 0..10_000 {
            let x = scaled_normal(&mut rng, 6, 1e-2, 1e2);
            let diff = (r.evaluate(&x) - groupsort(&x, 2).unwrap()).amax();
            assert!(diff <= 1e-12 * x.amax().max(1.0), "diff {diff}");
        }
    }

    #[test]
    fn activations_are_one_lipschitz() {
        let mut rng = chunk_rng(5, 0);
        let v4 = unit_vector(&mut rng, 4);
        let specs = [
            ActivationSpec::maxmin(),
            ActivationSpec::groupsort(4),
            ActivationSpec::fullsort(8),
            ActivationSpec::householder(v4).unwrap(),
            ActivationSpec::relu(),
        ];
        for spec in &specs {
            for _ in 0..10_000 {
                let x = scaled_normal(&mut rng, 8, 1e-2, 1e2);
                let y = scaled_normal(&mut rng, 8, 1e-2, 1e2);
                let lhs = (apply(spec, &x).unwrap() - apply(spec, &y).unwrap()).norm();
                let rhs = (&x - &y).norm();
                assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12, "{:?}: {lhs} > {rhs}", spec.kind);
            }
        }
    }

    #[test]
    fn householder_jacobian_is_orthogonal() {
        let mut rng = chunk_rng(9, 0);
        for _ in 0..200 {
            let v = unit_vector(&mut rng, 3);
            let spec = ActivationSpec::householder(v).unwrap();
            let x = scaled_normal(&mut rng, 9, 0.1, 10.0);
            let j = jacobian_factor(&spec, &x).unwrap();
            for s in j.svd(false, false).singular_values.iter() {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_examples() {
        let j = jacobian_factor(&ActivationSpec::maxmin(), &dv(&[1.0, 2.0])).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let j = jacobian_factor(&ActivationSpec::householder(maxmin_v()).unwrap(), &dv(&[1.0, 0.0])).unwrap();
        assert_eq!(j, DMatrix::identity(2, 2));
        let j = jacobian_factor(&ActivationSpec::relu(), &dv(&[-1.0, 2.0])).unwrap();
        assert_eq!(j, DMatrix::from_diagonal(&dv(&[0.0, 1.0])));
        // ties: stable order, identity permutation
        let j = jacobian_factor(&ActivationSpec::maxmin(), &dv(&[1.0, 1.0])).unwrap();
        assert_eq!(j, DMatrix::identity(2, 2));
    }

    #[test]
    fn groupsort_is_not_slope_restricted() {
        // [0,1] slope restriction would need dphi_i * (dx_i - dphi_i) >= 0 for every i.
        let x = dv(&[1.0, 0.0]);
        let y = dv(&[0.0, 2.0]);
        let dx = &x - &y;
        let dphi = groupsort(&x, 2).unwrap() - groupsort(&y, 2).unwrap();
        let worst = (0..2)
            .map(|i| dphi[i] * (dx[i] - dphi[i]))
            .fold(f64::INFINITY, f64::min);
        assert!(worst < 0.0, "no violation: {worst}");
        // the entrywise difference quotient leaves [0, 1]
        assert_eq!(dphi[0] / dx[0], -1.0);
    }

    #[test]
    fn group_sums_preserved() {
        let mut rng = chunk_rng(2, 0);
        for _ in 0..1000 {
            let x = scaled_normal(&mut rng, 12, 0.01, 100.0);
            let y = groupsort(&x, 3).unwrap();
            for g in 0..4 {
                let a: f64 = x.rows(3 * g, 3).sum();
                let b: f64 = y.rows(3 * g, 3).sum();
                assert!((a - b).abs() <= 1e-12 * x.amax().max(1.0));
            }
        }
    }
}
