//! Builds the certification SDPs for every supported architecture.
//!
//! Explicit networks are described by a linear "chain" over the stacked
//! increments `[Δx0; Δv1; ...; Δv_L]`, where `Δv_i` is the output increment
//! of activation layer `i`. Each activation layer contributes
//! `[A_i; B_i]ᵀ X_i [A_i; B_i]` with `A_i` the pre-activation map and `B_i`
//! the selector of `Δv_i`; the network output is `C Δ`.

use nalgebra::{DMatrix, DVector};

use crate::activations::maxmin_to_residual_relu;
use crate::error::{LipError, Result};
use crate::model::{ActivationKind, ActivationSpec, Architecture, Model};
use crate::qc::QcKind;
use crate::sdp::{AffineLmiBlock, BoundSemantics, SdpProblem};

/// Margin turning the strict well-posedness inequality into a non-strict one.
pub const DEQ_STRICT_MARGIN: f64 = 1e-8;
/// Lower bound enforced on the eigenvalues of `Π`.
pub const DEQ_PI_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiplierClass {
    /// `λ` and `γ` per group.
    Neuron2,
    /// `λ` per group, `γ = 0`.
    Neuron1,
    /// One `(λ, γ)` pair per layer.
    Layer2,
    /// One `λ` per layer; reproduces the product of spectral norms.
    Layer1,
}

impl MultiplierClass {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "neuron2" => Ok(Self::Neuron2),
            "neuron1" => Ok(Self::Neuron1),
            "layer2" => Ok(Self::Layer2),
            "layer1" => Ok(Self::Layer1),
            _ => Err(LipError::Value(format!("unknown multiplier class {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Neuron2 => "neuron2",
            Self::Neuron1 => "neuron1",
            Self::Layer2 => "layer2",
            Self::Layer1 => "layer1",
        }
    }

    fn per_group(self) -> bool {
        matches!(self, Self::Neuron2 | Self::Neuron1)
    }

    fn with_gamma(self) -> bool {
        matches!(self, Self::Neuron2 | Self::Layer2)
    }
}

/// Status of the DEQ well-posedness precondition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WellPosedness {
    Certified,
    Waived,
    Unverified,
}

/// One decision variable scaling the per-group matrix `mat` inside `T`.
#[derive(Debug, Clone)]
struct Multiplier {
    var: usize,
    groups: Vec<usize>,
    mat: DMatrix<f64>,
}

/// How the multipliers of one activation layer are parameterized.
///
/// With `S` or `P` free, every admissible `S`/`P` term (and the `γ` term) is a
/// multiple of the invariant `K(Δin - Δout) = 0` that sorting and Householder
/// groups satisfy exactly, and the family contains a zero-cost ray along
/// `-(Δin - Δout)ᵀK(Δin - Δout)`. The optimum is then only approached in the
/// limit. `reduced` imposes the invariant directly instead: the constraint is
/// restricted to its null space and only `λ` remains, which has the same
/// optimal value and a well-posed dual.
#[derive(Debug, Clone, Copy)]
struct MultiplierLayout {
    mclass: MultiplierClass,
    reduced: bool,
}

impl MultiplierLayout {
    fn t_only(mclass: MultiplierClass) -> Self {
        Self { mclass, reduced: false }
    }

    fn reduced(mclass: MultiplierClass) -> Self {
        Self { mclass, reduced: true }
    }
}

/// Adds the multiplier variables of one activation layer.
fn add_multipliers(
    p: &mut SdpProblem,
    layer: usize,
    width: usize,
    act: &ActivationSpec,
    layout: MultiplierLayout,
) -> Result<Vec<Multiplier>> {
    let kind = QcKind::for_activation(act)?;
    let ng = act.group_size;
    act.check_width(width)?;
    let n_groups = width / ng;
    let structure = kind.structure(ng);
    let eye = DMatrix::identity(ng, ng);
    // With a single unit per group, 1 1ᵀ coincides with I.
    let gamma_redundant = kind == QcKind::GroupSort && ng == 1;
    let mut out = Vec::new();
    let sets: Vec<(String, Vec<usize>)> = if layout.mclass.per_group() {
        (0..n_groups).map(|g| (format!("{layer}_{}", g + 1), vec![g])).collect()
    } else {
        vec![(format!("{layer}"), (0..n_groups).collect())]
    };
    for (suffix, groups) in sets {
        let lambda = p.add_var(format!("lambda_{suffix}"));
        p.add_nonneg(lambda);
        out.push(Multiplier { var: lambda, groups: groups.clone(), mat: eye.clone() });
        if layout.mclass.with_gamma() && !gamma_redundant && !layout.reduced {
            let gamma = p.add_var(format!("gamma_{suffix}"));
            out.push(Multiplier { var: gamma, groups: groups.clone(), mat: structure.clone() });
        }
    }
    Ok(out)
}

/// `[A; B]ᵀ [[T, 0], [0, -T]] [A; B]` for the contribution of `m` to `T`.
fn lifted(m: &Multiplier, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ng = m.mat.nrows();
    let dim = a.ncols();
    let mut out = DMatrix::zeros(dim, dim);
    for &g in &m.groups {
        let ag = a.rows(g * ng, ng);
        let bg = b.rows(g * ng, ng);
        out += ag.transpose() * (&m.mat * ag) - bg.transpose() * (&m.mat * bg);
    }
    out
}

/// Rows `K_g (A_g - B_g)` of the invariant every group satisfies.
fn invariant_rows(act: &ActivationSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let kind = QcKind::for_activation(act)?;
    let ng = act.group_size;
    let diff = a - b;
    let mut rows: Vec<DMatrix<f64>> = Vec::new();
    for g in 0..diff.nrows() / ng {
        let dg = diff.rows(g * ng, ng);
        rows.push(match &kind {
            QcKind::GroupSort => DMatrix::from_element(1, ng, 1.0) * dg,
            QcKind::Householder(_) => kind.structure(ng) * dg,
        });
    }
    let dim = a.ncols();
    let total: usize = rows.iter().map(|r| r.nrows()).sum();
    let mut e = DMatrix::zeros(total, dim);
    let mut r0 = 0;
    for r in rows {
        e.view_mut((r0, 0), (r.nrows(), dim)).copy_from(&r);
        r0 += r.nrows();
    }
    Ok(e)
}

/// Orthonormal basis of the null space of `e`.
fn null_basis(e: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = e.ncols();
    if e.nrows() == 0 {
        return DMatrix::identity(dim, dim);
    }
    let eig = nalgebra::SymmetricEigen::new(e.transpose() * e);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..dim).filter(|&i| eig.eigenvalues[i] <= 1e-12 * top.max(1.0)).collect();
    DMatrix::from_fn(dim, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])])
}

/// `Nᵀ F N` for every matrix of the block.
fn restrict(block: &AffineLmiBlock, n: &DMatrix<f64>) -> AffineLmiBlock {
    let project = |m: &DMatrix<f64>| crate::linalg::symmetrize(&(n.transpose() * m * n));
    let mut out = AffineLmiBlock::new(project(&block.f0));
    for (k, m) in &block.terms {
        out.add_term(*k, project(m));
    }
    out
}

/// Restricts `block` to the increments satisfying every group invariant.
fn restrict_to_invariants(block: &AffineLmiBlock, rows: &[DMatrix<f64>]) -> AffineLmiBlock {
    let dim = block.size;
    let total: usize = rows.iter().map(|r| r.nrows()).sum();
    let mut e = DMatrix::zeros(total, dim);
    let mut r0 = 0;
    for r in rows {
        e.view_mut((r0, 0), (r.nrows(), dim)).copy_from(r);
        r0 += r.nrows();
    }
    restrict(block, &null_basis(&e))
}

/// Adds every multiplier's lifted contribution to `block`.
fn add_lifted(block: &mut AffineLmiBlock, mults: &[Multiplier], a: &DMatrix<f64>, b: &DMatrix<f64>) {
    for m in mults {
        block.add_term(m.var, lifted(m, a, b));
    }
}

fn selector(rows: usize, dim: usize, offset: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(rows, dim);
    for i in 0..rows {
        e[(i, offset + i)] = 1.0;
    }
    e
}

fn padded_identity(dim: usize, offset: usize, n: usize) -> DMatrix<f64> {
    let e = selector(n, dim, offset);
    e.transpose() * e
}

struct ChainLayer {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    width: usize,
}

struct Chain {
    dim: usize,
    /// Sizes of the stacked segments `x0, v1, ..., v_L`.
    segments: Vec<usize>,
    layers: Vec<ChainLayer>,
    out: DMatrix<f64>,
}

fn build_chain(model: &Model) -> Result<Chain> {
    let (n0, widths): (usize, Vec<usize>) = match model.arch {
        Architecture::Feedforward | Architecture::Residual => (
            model.input_dim(),
            model.layers.iter().filter(|l| l.activation.is_some()).map(|l| l.weight.nrows()).collect(),
        ),
        Architecture::SingleLayerResidual => {
            let p = model.single_res.as_ref().expect("validated");
            (p.w1.ncols(), vec![p.w1.nrows()])
        }
        _ => return Err(LipError::Unsupported(format!("{:?} models have no layer chain", model.arch))),
    };
    let dim = n0 + widths.iter().sum::<usize>();
    let mut segments = vec![n0];
    segments.extend(&widths);
    let mut offset = n0;
    let mut layers = Vec::new();
    if model.arch == Architecture::SingleLayerResidual {
        let p = model.single_res.as_ref().expect("validated");
        let e0 = selector(n0, dim, 0);
        let ev = selector(widths[0], dim, n0);
        let out = &p.h1 * &e0 + &p.g1 * &ev;
        layers.push(ChainLayer { a: &p.w1 * e0, b: ev, width: widths[0] });
        return Ok(Chain { dim, segments, layers, out });
    }
    let mut c = selector(n0, dim, 0);
    for layer in &model.layers {
        match &layer.activation {
            Some(_) => {
                let n = layer.weight.nrows();
                let ev = selector(n, dim, offset);
                offset += n;
                layers.push(ChainLayer { a: &layer.weight * &c, b: ev.clone(), width: n });
                c = match &layer.residual {
                    Some(g) => c + g * ev,
                    None => ev,
                };
            }
            None => c = &layer.weight * c,
        }
    }
    Ok(Chain { dim, segments, layers, out: c })
}

fn activation(model: &Model) -> Result<&ActivationSpec> {
    model
        .activation
        .as_ref()
        .ok_or_else(|| LipError::Value("model has no activation".into()))
}

/// `Σ_i [A_i; B_i]ᵀ X_i [A_i; B_i] + CᵀC - ρ E0ᵀE0 ⪯ 0` over the chain.
fn chain_problem(
    model: &Model,
    chain: &Chain,
    layout: MultiplierLayout,
    semantics: BoundSemantics,
) -> Result<(SdpProblem, AffineLmiBlock)> {
    let mut p = SdpProblem::new(semantics);
    let rho = p.add_rho();
    let mut block = AffineLmiBlock::new(chain.out.transpose() * &chain.out);
    block.add_term(rho, -padded_identity(chain.dim, 0, chain.segments[0]));
    let mut rows = Vec::new();
    if !chain.layers.is_empty() {
        let act = activation(model)?;
        for (i, layer) in chain.layers.iter().enumerate() {
            let mults = add_multipliers(&mut p, i + 1, layer.width, act, layout)?;
            add_lifted(&mut block, &mults, &layer.a, &layer.b);
            if layout.reduced {
                rows.push(invariant_rows(act, &layer.a, &layer.b)?);
            }
        }
    }
    if layout.reduced {
        block = restrict_to_invariants(&block, &rows);
    }
    Ok((p, block))
}

/// Splits a block along `segments`; fails unless all off-diagonal parts vanish.
fn split_block(block: &AffineLmiBlock, segments: &[usize]) -> Result<Vec<AffineLmiBlock>> {
    let mut starts = Vec::with_capacity(segments.len());
    let mut acc = 0;
    for s in segments {
        starts.push(acc);
        acc += s;
    }
    let off_diag_zero = |m: &DMatrix<f64>| {
        starts.iter().zip(segments).all(|(&r0, &rn)| {
            starts.iter().zip(segments).all(|(&c0, &cn)| {
                r0 == c0 || m.view((r0, c0), (rn, cn)).iter().all(|v| *v == 0.0)
            })
        })
    };
    if !off_diag_zero(&block.f0) || !block.terms.iter().all(|(_, m)| off_diag_zero(m)) {
        return Err(LipError::Value("constraint is not block diagonal".into()));
    }
    Ok(starts
        .iter()
        .zip(segments)
        .map(|(&s, &n)| {
            let mut b = AffineLmiBlock::new(block.f0.view((s, s), (n, n)).into_owned());
            for (k, m) in &block.terms {
                b.add_term(*k, m.view((s, s), (n, n)).into_owned());
            }
            b
        })
        .collect())
}

fn require_feedforward(model: &Model) -> Result<()> {
    if model.arch != Architecture::Feedforward {
        return Err(LipError::Unsupported(format!("expected a feedforward model, got {:?}", model.arch)));
    }
    Ok(())
}

fn require_nonslope(model: &Model) -> Result<()> {
    if let Some(act) = &model.activation {
        if act.kind == ActivationKind::Relu && model.layers.iter().any(|l| l.activation.is_some()) {
            return Err(LipError::Unsupported(
                "ReLU networks are certified with the slope-restricted constraint (assemble_rr)".into(),
            ));
        }
    }
    Ok(())
}

/// ℓ2 certificate for a feedforward network; the bound is `√ρ`.
///
/// `decomposed` uses one block per layer with `S = P = 0`; otherwise the
/// single end-to-end block with free `S` and `P` is built (in its reduced form,
/// see `MultiplierLayout`).
pub fn assemble_l2_feedforward(model: &Model, mclass: MultiplierClass, decomposed: bool) -> Result<SdpProblem> {
    require_feedforward(model)?;
    require_nonslope(model)?;
    let chain = build_chain(model)?;
    let layout = if decomposed {
        MultiplierLayout::t_only(mclass)
    } else {
        MultiplierLayout::reduced(mclass)
    };
    let (mut p, block) = chain_problem(model, &chain, layout, BoundSemantics::SqrtRhoL2)?;
    if decomposed {
        for b in split_block(&block, &chain.segments)? {
            p.add_block(b);
        }
    } else {
        p.add_block(block);
    }
    Ok(p)
}

fn add_mu(p: &mut SdpProblem, n0: usize) -> Vec<usize> {
    (0..n0)
        .map(|j| {
            let v = p.add_var(format!("mu_{}", j + 1));
            p.add_nonneg(v);
            v
        })
        .collect()
}

fn t_matrix(mults: &[Multiplier], width: usize, sign: f64) -> Vec<(usize, DMatrix<f64>)> {
    let eye = DMatrix::identity(width, width);
    mults
        .iter()
        .map(|m| (m.var, lifted(m, &eye, &DMatrix::zeros(width, width)) * sign))
        .collect()
}

/// ℓ∞→ℓ1 certificate for output `label` (decoupled per-layer form); the bound is `ρ`.
pub fn assemble_linf(model: &Model, label: usize, mclass: MultiplierClass) -> Result<SdpProblem> {
    require_feedforward(model)?;
    require_nonslope(model)?;
    let model = model.select_output(label)?;
    let n0 = model.input_dim();
    let mut p = SdpProblem::new(BoundSemantics::RhoLinfL1);
    let rho = p.add_rho();
    let mu = add_mu(&mut p, n0);
    // T_{i-1} terms as (var, matrix) in the width of layer i-1; T_0 = diag(μ).
    let mut prev: Vec<(usize, DMatrix<f64>)> = mu
        .iter()
        .enumerate()
        .map(|(j, v)| (*v, padded_identity(n0, j, 1)))
        .collect();
    let mut prev_width = n0;
    let last = model.layers.len() - 1;
    for (i, layer) in model.layers.iter().enumerate().take(last) {
        let act = activation(&model)?;
        let n = layer.weight.nrows();
        let mults = add_multipliers(&mut p, i + 1, n, act, MultiplierLayout::t_only(mclass))?;
        // W_iᵀ T_i W_i - T_{i-1} ⪯ 0
        let mut block = AffineLmiBlock::zeros(prev_width);
        add_lifted(&mut block, &mults, &layer.weight, &DMatrix::zeros(n, prev_width));
        for (v, m) in &prev {
            block.add_term(*v, -m);
        }
        p.add_block(block);
        prev = t_matrix(&mults, n, 1.0);
        prev_width = n;
    }
    // [[T_{l-1}, wᵀ], [w, 2ρ - Σμ]] ⪰ 0, negated.
    let w = model.layers[last].weight.row(0).transpose();
    let size = prev_width + 1;
    let mut f0 = DMatrix::zeros(size, size);
    for j in 0..prev_width {
        f0[(j, prev_width)] = -w[j];
        f0[(prev_width, j)] = -w[j];
    }
    let mut block = AffineLmiBlock::new(f0);
    for (v, m) in &prev {
        let mut big = DMatrix::zeros(size, size);
        big.view_mut((0, 0), (prev_width, prev_width)).copy_from(&-m);
        block.add_term(*v, big);
    }
    let corner = padded_identity(size, prev_width, 1);
    for v in &mu {
        block.add_term(*v, corner.clone());
    }
    block.add_term(rho, &corner * -2.0);
    p.add_block(block);
    Ok(p)
}

/// End-to-end ℓ∞→ℓ1 block with the scalar coordinate padding and free
/// `S`, `P`; a cross-check for [`assemble_linf`] on small networks.
pub fn assemble_linf_dense(model: &Model, label: usize, mclass: MultiplierClass) -> Result<SdpProblem> {
    require_feedforward(model)?;
    require_nonslope(model)?;
    let model = model.select_output(label)?;
    let mut hidden = model.clone();
    let final_layer = hidden.layers.pop().expect("validated");
    let n0 = model.input_dim();
    let dim_hidden = n0 + model.hidden_widths().iter().sum::<usize>();
    let size = dim_hidden + 1;
    let mut p = SdpProblem::new(BoundSemantics::RhoLinfL1);
    let rho = p.add_rho();
    let mu = add_mu(&mut p, n0);
    let mut f0 = DMatrix::zeros(size, size);
    let last_width = final_layer.weight.ncols();
    let last_offset = size - last_width;
    for j in 0..last_width {
        f0[(0, last_offset + j)] = final_layer.weight[(0, j)];
        f0[(last_offset + j, 0)] = final_layer.weight[(0, j)];
    }
    let mut block = AffineLmiBlock::new(f0);
    let corner = padded_identity(size, 0, 1);
    block.add_term(rho, &corner * -2.0);
    for (j, v) in mu.iter().enumerate() {
        block.add_term(*v, &corner - padded_identity(size, 1 + j, 1));
    }
    if !hidden.layers.is_empty() {
        // Chain over [x0; v1..v_{l-1}] without the final map, padded by the scalar coordinate.
        let act = activation(&model)?.clone();
        let mut offset = 1 + n0;
        let mut c = selector(n0, size, 1);
        let mut rows = Vec::new();
        for (i, layer) in hidden.layers.iter().enumerate() {
            let n = layer.weight.nrows();
            let ev = selector(n, size, offset);
            offset += n;
            let mults = add_multipliers(&mut p, i + 1, n, &act, MultiplierLayout::reduced(mclass))?;
            let a = &layer.weight * &c;
            add_lifted(&mut block, &mults, &a, &ev);
            rows.push(invariant_rows(&act, &a, &ev)?);
            c = ev;
        }
        block = restrict_to_invariants(&block, &rows);
    }
    p.add_block(block);
    Ok(p)
}

/// ℓ2 certificate for residual networks (dense form); the bound is `√ρ`.
pub fn assemble_l2_residual(model: &Model, zero_s: bool, zero_p: bool) -> Result<SdpProblem> {
    match model.arch {
        Architecture::Residual => {
            if zero_s && zero_p {
                return Err(LipError::Value(
                    "residual networks need S or P free; set at most one of them to zero".into(),
                ));
            }
        }
        Architecture::SingleLayerResidual => {}
        other => return Err(LipError::Unsupported(format!("expected a residual model, got {other:?}"))),
    }
    require_nonslope(model)?;
    let chain = build_chain(model)?;
    let layout = if zero_s && zero_p {
        MultiplierLayout::t_only(MultiplierClass::Neuron2)
    } else {
        MultiplierLayout::reduced(MultiplierClass::Neuron2)
    };
    let (mut p, block) = chain_problem(model, &chain, layout, BoundSemantics::SqrtRhoL2Residual)?;
    p.add_block(block);
    Ok(p)
}

/// Slope-restricted baseline: every MaxMin layer is rewritten as
/// `H u + G ReLU(W u)` and certified with `[[0, T], [T, -2T]]`, `T` diagonal.
pub fn assemble_rr(model: &Model) -> Result<SdpProblem> {
    if !matches!(model.arch, Architecture::Feedforward | Architecture::Residual) {
        return Err(LipError::Unsupported(format!("{:?} models are not supported by the ReLU rewrite", model.arch)));
    }
    let act_layers: Vec<_> = model.layers.iter().filter(|l| l.activation.is_some()).collect();
    if act_layers.is_empty() {
        return Err(LipError::Unsupported("model has no MaxMin activation to rewrite".into()));
    }
    let act = activation(model)?;
    let is_pairwise_sort = matches!(act.kind, ActivationKind::MaxMin | ActivationKind::GroupSort | ActivationKind::FullSort)
        && act.group_size == 2;
    if !is_pairwise_sort {
        return Err(LipError::Unsupported("the ReLU rewrite applies to MaxMin activations only".into()));
    }
    let n0 = model.input_dim();
    let dim = n0 + act_layers.iter().map(|l| l.weight.nrows()).sum::<usize>();
    let mut p = SdpProblem::new(BoundSemantics::SqrtRhoL2);
    let rho = p.add_rho();
    let mut block = AffineLmiBlock::zeros(dim);
    block.add_term(rho, -padded_identity(dim, 0, n0));
    let mut c = selector(n0, dim, 0);
    let mut offset = n0;
    let mut act_index = 0;
    for layer in &model.layers {
        if layer.activation.is_none() {
            c = &layer.weight * c;
            continue;
        }
        act_index += 1;
        let n = layer.weight.nrows();
        let rw = maxmin_to_residual_relu(n)?;
        let er = selector(n, dim, offset);
        offset += n;
        let pre = &layer.weight * &c;
        // ReLU input W·pre and output r; slope-restricted multipliers per unit.
        let a = &rw.w * &pre;
        for u in 0..n {
            let t = p.add_var(format!("t_{act_index}_{}", u + 1));
            p.add_nonneg(t);
            let au = a.row(u);
            let bu = er.row(u);
            let cross = au.transpose() * bu;
            let contrib = &cross + cross.transpose() - bu.transpose() * bu * 2.0;
            block.add_term(t, contrib);
        }
        let out = &rw.h * &pre + &rw.g * &er;
        c = match &layer.residual {
            Some(g) => c + g * out,
            None => out,
        };
    }
    block.f0 = c.transpose() * &c;
    p.add_block(block);
    Ok(p)
}

fn deq_parts(model: &Model) -> Result<(&crate::model::DeqParams, &ActivationSpec)> {
    if model.arch != Architecture::Deq {
        return Err(LipError::Unsupported(format!("expected a deq model, got {:?}", model.arch)));
    }
    require_nonslope(model)?;
    Ok((model.deq.as_ref().expect("validated"), activation(model)?))
}

/// Feasibility problem certifying existence and uniqueness of the DEQ fixed point.
pub fn assemble_deq_wellposed(model: &Model) -> Result<SdpProblem> {
    let (d, act) = deq_parts(model)?;
    let act = act.clone();
    if act.kind == ActivationKind::Relu {
        return Err(LipError::Unsupported("ReLU DEQs are outside the supported activations".into()));
    }
    let n = d.w.nrows();
    let dim = 2 * n;
    let mut p = SdpProblem::new(BoundSemantics::Feasibility);
    let mut main = AffineLmiBlock::new(DMatrix::identity(dim, dim) * DEQ_STRICT_MARGIN);
    let mut floor = AffineLmiBlock::new(DMatrix::identity(n, n) * DEQ_PI_FLOOR);
    for i in 0..n {
        for j in i..n {
            let v = p.add_var(format!("pi_{}_{}", i + 1, j + 1));
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            let mut big = DMatrix::zeros(dim, dim);
            big.view_mut((0, 0), (n, n)).copy_from(&(&e * -2.0));
            big.view_mut((0, n), (n, n)).copy_from(&e);
            big.view_mut((n, 0), (n, n)).copy_from(&e);
            main.add_term(v, big);
            floor.add_term(v, -e);
        }
    }
    let mults = add_multipliers(&mut p, 1, n, &act, MultiplierLayout::reduced(MultiplierClass::Neuron2))?;
    let mut a = DMatrix::zeros(n, dim);
    a.view_mut((0, 0), (n, n)).copy_from(&d.w);
    let b = selector(n, dim, n);
    add_lifted(&mut main, &mults, &a, &b);
    let rows = [invariant_rows(&act, &a, &b)?];
    p.add_block(restrict_to_invariants(&main, &rows));
    p.add_block(floor);
    Ok(p)
}

/// ℓ2 certificate from input to output of a well-posed DEQ; the bound is `√ρ`.
pub fn assemble_deq_lipschitz(model: &Model, wellposed: WellPosedness) -> Result<SdpProblem> {
    let (d, act) = deq_parts(model)?;
    if wellposed == WellPosedness::Unverified {
        return Err(LipError::Precondition(
            "DEQ well-posedness must be certified (or explicitly waived) first".into(),
        ));
    }
    let nz = d.w.nrows();
    let nx = d.u.ncols();
    let dim = nz + nx;
    let mut p = SdpProblem::new(BoundSemantics::SqrtRhoL2Deq);
    let rho = p.add_rho();
    let mut f0 = DMatrix::zeros(dim, dim);
    f0.view_mut((0, 0), (nz, nz)).copy_from(&(d.w_out.transpose() * &d.w_out));
    let mut block = AffineLmiBlock::new(f0);
    block.add_term(rho, -padded_identity(dim, nz, nx));
    let mults = add_multipliers(&mut p, 1, nz, act, MultiplierLayout::reduced(MultiplierClass::Neuron2))?;
    let mut a = DMatrix::zeros(nz, dim);
    a.view_mut((0, 0), (nz, nz)).copy_from(&d.w);
    a.view_mut((0, nz), (nz, nx)).copy_from(&d.u);
    let b = selector(nz, dim, 0);
    add_lifted(&mut block, &mults, &a, &b);
    let rows = [invariant_rows(act, &a, &b)?];
    p.add_block(restrict_to_invariants(&block, &rows));
    Ok(p)
}

/// ℓ2 certificate for the neural ODE flow map over `[0, t_final]`.
///
/// The decision variable is `ρ t_final` for the contraction rate `ρ`, so the
/// bound is `exp(rho / 2)` for any horizon. `ρ` may be negative.
pub fn assemble_node_lipschitz(model: &Model) -> Result<SdpProblem> {
    if model.arch != Architecture::NeuralOde {
        return Err(LipError::Unsupported(format!("expected a neural ODE model, got {:?}", model.arch)));
    }
    require_nonslope(model)?;
    let act = activation(model)?;
    let nd = model.node.as_ref().expect("validated");
    let n = nd.w0.nrows();
    let dim = 2 * n;
    let mut p = SdpProblem::new(BoundSemantics::ExpHalfRhoL2Node);
    let rho = p.add_rho();
    let mut f0 = DMatrix::zeros(dim, dim);
    f0.view_mut((0, n), (n, n)).copy_from(&nd.g);
    f0.view_mut((n, 0), (n, n)).copy_from(&nd.g.transpose());
    let mut block = AffineLmiBlock::new(f0);
    block.add_term(rho, -padded_identity(dim, 0, n) / nd.t_final);
    let mults = add_multipliers(&mut p, 1, n, act, MultiplierLayout::reduced(MultiplierClass::Neuron2))?;
    let mut a = DMatrix::zeros(n, dim);
    a.view_mut((0, 0), (n, n)).copy_from(&nd.w0);
    let b = selector(n, dim, n);
    add_lifted(&mut block, &mults, &a, &b);
    let rows = [invariant_rows(act, &a, &b)?];
    p.add_block(restrict_to_invariants(&block, &rows));
    Ok(p)
}

/// Point with every variable zero except the named ones.
pub fn point_from_names(problem: &SdpProblem, values: &[(&str, f64)]) -> Result<DVector<f64>> {
    let mut z = DVector::zeros(problem.num_vars);
    for (name, v) in values {
        let k = problem
            .var_index(name)
            .ok_or_else(|| LipError::Value(format!("no variable named {name}")))?;
        z[k] = *v;
    }
    Ok(z)
}
