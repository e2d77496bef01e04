//! Diagonal equilibration of an SDP: each block is multiplied by a positive
//! scalar and each variable rescaled, so the transformed problem has the same
//! solutions up to the recorded factors.

use nalgebra::{DMatrix, DVector};

use crate::sdp::SdpProblem;

const ROUNDS: usize = 20;
const LIMIT: f64 = 1e12;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Row,
    Col,
}

pub(crate) struct Equilibration {
    /// Congruence factor per block.
    block: Vec<f64>,
    /// Scale of every variable (`z_k = var_k y_k / f0`).
    var: Vec<f64>,
    f0: f64,
    objective: f64,
}

impl Equilibration {
    /// Balances the table of block/variable coefficient magnitudes.
    pub fn compute(problem: &SdpProblem) -> Self {
        let nb = problem.blocks.len();
        let nv = problem.num_vars;
        // Columns 0..nv are variables, column nv is F0.
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (b, block) in problem.blocks.iter().enumerate() {
            let a0 = block.f0.amax();
            if a0 > 0.0 {
                entries.push((b, nv, a0));
            }
            for (k, f) in &block.terms {
                let a = f.amax();
                if a > 0.0 {
                    entries.push((b, *k, a));
                }
            }
        }
        let mut row = vec![1.0; nb];
        let mut col = vec![1.0; nv + 1];
        // Geometric-mean rounds, then a few max-norm rounds.
        for round in 0..ROUNDS + 2 {
            let geometric = round < ROUNDS;
            for side in [Side::Row, Side::Col] {
                let n = if side == Side::Row { nb } else { nv + 1 };
                let mut hi = vec![0.0f64; n];
                let mut lo = vec![f64::INFINITY; n];
                for &(b, k, a) in &entries {
                    let v = row[b] * col[k] * a;
                    let i = if side == Side::Row { b } else { k };
                    hi[i] = hi[i].max(v);
                    lo[i] = lo[i].min(v);
                }
                let target = if side == Side::Row { &mut row } else { &mut col };
                for (i, t) in target.iter_mut().enumerate() {
                    if hi[i] > 0.0 {
                        let m = if geometric { hi[i] * lo[i] } else { hi[i] };
                        *t = (*t / m.sqrt()).clamp(1.0 / LIMIT, LIMIT);
                    }
                }
            }
        }
        let f0 = col.pop().expect("F0 column");
        let objective = problem
            .objective
            .iter()
            .zip(&col)
            .map(|(c, d)| (c * d).abs())
            .fold(0.0, f64::max);
        Self { block: row, var: col, f0, objective: if objective > 0.0 { objective } else { 1.0 } }
    }

    pub fn apply(&self, problem: &SdpProblem) -> SdpProblem {
        let mut out = problem.clone();
        for (k, c) in out.objective.iter_mut().enumerate() {
            *c *= self.var[k] / self.objective;
        }
        for (b, block) in out.blocks.iter_mut().enumerate() {
            let e = self.block[b];
            block.f0 *= e * self.f0;
            for (k, f) in block.terms.iter_mut() {
                *f *= e * self.var[*k];
            }
        }
        out
    }

    /// Maps a point and dual blocks of the transformed problem back.
    pub fn recover(&self, y: &DVector<f64>, x: &[DMatrix<f64>]) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        let z = DVector::from_fn(y.len(), |k, _| y[k] * self.var[k] / self.f0);
        let x = x.iter().zip(&self.block).map(|(m, e)| m * (self.objective * e)).collect();
        (z, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::{AffineLmiBlock, BoundSemantics};

    #[test]
    fn badly_scaled_chain_is_balanced() {
        // ρ ≥ 1e6 x  and  x ≥ 1e6: optimum ρ = 1e12.
        let mut p = SdpProblem::new(BoundSemantics::RhoLinfL1);
        let rho = p.add_rho();
        let x = p.add_var("x");
        let mut a = AffineLmiBlock::zeros(1);
        a.add_term(rho, DMatrix::from_element(1, 1, -1.0));
        a.add_term(x, DMatrix::from_element(1, 1, 1e6));
        p.add_block(a);
        let mut b = AffineLmiBlock::new(DMatrix::from_element(1, 1, 1e6));
        b.add_term(x, DMatrix::from_element(1, 1, -1.0));
        p.add_block(b);
        let eq = Equilibration::compute(&p);
        let q = eq.apply(&p);
        for blk in &q.blocks {
            for (_, f) in &blk.terms {
                assert!((f[(0, 0)].abs().log10()).abs() < 3.0, "{}", f[(0, 0)]);
            }
        }
        // The optimum of the balanced problem maps back to the original one.
        let y = DVector::from_fn(2, |k, _| [1e12, 1e6][k] * eq.f0 / eq.var[k]);
        let (z, _) = eq.recover(&y, &[]);
        assert!((z[0] - 1e12).abs() < 1e-3 && (z[1] - 1e6).abs() < 1e-9);
        assert!(p.max_violation(&z) <= 1e-6);
    }
}
