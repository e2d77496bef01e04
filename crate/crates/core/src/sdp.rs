//! Semidefinite programs over a shared decision vector `z`:
//! minimize `cᵀz` subject to `F0 + Σ z_k F_k ⪯ 0` for every block.

use nalgebra::{DMatrix, DVector};

use crate::error::{LipError, Result};
use crate::linalg::{asymmetry, lambda_max};

/// How the optimal `ρ` turns into a Lipschitz bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSemantics {
    SqrtRhoL2,
    RhoLinfL1,
    SqrtRhoL2Residual,
    SqrtRhoL2Deq,
    ExpHalfRhoL2Node,
    Feasibility,
}

impl BoundSemantics {
    pub fn transform(self, rho: f64) -> f64 {
        match self {
            Self::SqrtRhoL2 | Self::SqrtRhoL2Residual | Self::SqrtRhoL2Deq => rho.max(0.0).sqrt(),
            Self::RhoLinfL1 => rho.max(0.0),
            Self::ExpHalfRhoL2Node => (rho / 2.0).exp(),
            Self::Feasibility => f64::NAN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SqrtRhoL2 => "sqrt_rho_l2",
            Self::RhoLinfL1 => "rho_linf_l1",
            Self::SqrtRhoL2Residual => "sqrt_rho_l2_residual",
            Self::SqrtRhoL2Deq => "sqrt_rho_l2_deq",
            Self::ExpHalfRhoL2Node => "exp_half_rho_l2_node",
            Self::Feasibility => "feasibility",
        }
    }
}

/// `F0 + Σ z_k F_k ⪯ 0`
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLmiBlock {
    pub size: usize,
    pub f0: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl AffineLmiBlock {
    pub fn new(f0: DMatrix<f64>) -> Self {
        Self { size: f0.nrows(), f0, terms: Vec::new() }
    }

    pub fn zeros(size: usize) -> Self {
        Self::new(DMatrix::zeros(size, size))
    }

    /// Adds `coef` to the coefficient matrix of variable `var`.
    pub fn add_term(&mut self, var: usize, coef: DMatrix<f64>) {
        if coef.iter().all(|v| *v == 0.0) {
            return;
        }
        match self.terms.iter_mut().find(|(k, _)| *k == var) {
            Some((_, m)) => *m += coef,
            None => self.terms.push((var, coef)),
        }
    }

    pub fn sort_terms(&mut self) {
        self.terms.sort_by_key(|(k, _)| *k);
        self.terms.retain(|(_, m)| m.iter().any(|v| *v != 0.0));
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.f0.clone();
        for (k, f) in &self.terms {
            m += f * z[*k];
        }
        m
    }

    /// True when every matrix of the block is diagonal.
    pub fn is_diagonal(&self) -> bool {
        let diag = |m: &DMatrix<f64>| {
            (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
        };
        diag(&self.f0) && self.terms.iter().all(|(_, m)| diag(m))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub num_vars: usize,
    pub objective: DVector<f64>,
    pub blocks: Vec<AffineLmiBlock>,
    pub var_names: Vec<String>,
    pub bound_semantics: BoundSemantics,
    /// Index of `ρ`, absent for feasibility problems.
    pub rho_index: Option<usize>,
}

impl SdpProblem {
    pub fn new(bound_semantics: BoundSemantics) -> Self {
        Self {
            num_vars: 0,
            objective: DVector::zeros(0),
            blocks: Vec::new(),
            var_names: Vec::new(),
            bound_semantics,
            rho_index: None,
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>) -> usize {
        self.var_names.push(name.into());
        self.num_vars += 1;
        self.objective = self.objective.clone().insert_row(self.num_vars - 1, 0.0);
        self.num_vars - 1
    }

    /// Adds `ρ` with objective coefficient 1.
    pub fn add_rho(&mut self) -> usize {
        let k = self.add_var("rho");
        self.objective[k] = 1.0;
        self.rho_index = Some(k);
        k
    }

    pub fn add_block(&mut self, mut block: AffineLmiBlock) {
        block.sort_terms();
        self.blocks.push(block);
    }

    /// `z_var >= 0` as the 1x1 block `-z_var ⪯ 0`.
    pub fn add_nonneg(&mut self, var: usize) {
        let mut b = AffineLmiBlock::zeros(1);
        b.add_term(var, DMatrix::from_element(1, 1, -1.0));
        self.add_block(b);
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.var_names.iter().position(|n| n == name)
    }

    /// Structural checks: sizes, symmetry, variable indices.
    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.num_vars || self.var_names.len() != self.num_vars {
            return Err(LipError::Dimension("objective or names disagree with num_vars".into()));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.size == 0 || block.f0.shape() != (block.size, block.size) {
                return Err(LipError::Dimension(format!("block {b} has inconsistent size")));
            }
            if asymmetry(&block.f0) > 1e-12 {
                return Err(LipError::Value(format!("block {b} F0 is not symmetric")));
            }
            for (k, f) in &block.terms {
                if *k >= self.num_vars {
                    return Err(LipError::Dimension(format!("block {b} references variable {k}")));
                }
                if f.shape() != (block.size, block.size) {
                    return Err(LipError::Dimension(format!("block {b} term {k} has wrong size")));
                }
                if asymmetry(f) > 1e-12 {
                    return Err(LipError::Value(format!("block {b} term {k} is not symmetric")));
                }
            }
        }
        Ok(())
    }

    /// Largest eigenvalue over all blocks of `F0 + Σ z_k F_k` (positive means violated).
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|b| lambda_max(&b.evaluate(z)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.size).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_max_problem_shape() {
        let mut p = SdpProblem::new(BoundSemantics::SqrtRhoL2);
        let t = p.add_rho();
        let mut b = AffineLmiBlock::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0])));
        b.add_term(t, -DMatrix::identity(2, 2));
        p.add_block(b);
        p.validate().unwrap();
        assert!(p.blocks[0].is_diagonal());
        assert_eq!(p.max_violation(&DVector::from_element(1, 3.0)), 0.0);
        assert_eq!(p.max_violation(&DVector::from_element(1, 2.0)), 1.0);
    }

    #[test]
    fn terms_accumulate_and_zero_terms_drop() {
        let mut b = AffineLmiBlock::zeros(2);
        b.add_term(0, DMatrix::identity(2, 2));
        b.add_term(0, DMatrix::identity(2, 2));
        b.add_term(1, DMatrix::zeros(2, 2));
        assert_eq!(b.terms.len(), 1);
        assert_eq!(b.terms[0].1[(1, 1)], 2.0);
    }

    #[test]
    fn validate_catches_asymmetry() {
        let mut p = SdpProblem::new(BoundSemantics::Feasibility);
        let k = p.add_var("a");
        let mut b = AffineLmiBlock::zeros(2);
        b.add_term(k, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        p.blocks.push(b);
        assert!(matches!(p.validate(), Err(LipError::Value(_))));
    }

    #[test]
    fn transforms() {
        assert_eq!(BoundSemantics::SqrtRhoL2.transform(4.0), 2.0);
        assert_eq!(BoundSemantics::RhoLinfL1.transform(7.0), 7.0);
        assert_eq!(BoundSemantics::ExpHalfRhoL2Node.transform(0.0), 1.0);
        assert!(BoundSemantics::Feasibility.transform(1.0).is_nan());
    }
}
