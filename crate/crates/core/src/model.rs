//! Network architectures, the JSON model format, forward evaluation and exact
//! Jacobians.
//!
//! Supported architectures:
//! - feedforward: `x_i = phi(W_i x_{i-1} + b_i)`, last layer affine;
//! - residual: layers carrying `G` are `x + G phi(W x + b)`, layers without
//!   `G` are plain affine maps;
//! - single-layer residual: `H1 x + G1 phi(W1 x + b1)`;
//! - deep equilibrium: `z = phi(W z + U x + bz)`, `y = Wo z + by`;
//! - neural ODE: `dz/dt = G phi(W0 z + W1 t + b0) + b1`, `z(0) = x`, output `z(t_final)`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activations::{self, check_unit};
use crate::error::{LipError, Result};
use crate::linalg::{is_finite_matrix, is_finite_vector, matrix_from_rows, matrix_to_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    GroupSort,
    MaxMin,
    FullSort,
    Householder,
}

impl ActivationKind {
    /// GroupSort family: MaxMin, GroupSort and FullSort.
    pub fn is_sorting(self) -> bool {
        matches!(self, Self::GroupSort | Self::MaxMin | Self::FullSort)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub group_size: usize,
    pub householder_v: Option<DVector<f64>>,
}

impl ActivationSpec {
    pub fn maxmin() -> Self {
        Self { kind: ActivationKind::MaxMin, group_size: 2, householder_v: None }
    }

    pub fn groupsort(group_size: usize) -> Self {
        Self { kind: ActivationKind::GroupSort, group_size, householder_v: None }
    }

    pub fn fullsort(width: usize) -> Self {
        Self { kind: ActivationKind::FullSort, group_size: width, householder_v: None }
    }

    pub fn relu() -> Self {
        Self { kind: ActivationKind::Relu, group_size: 1, householder_v: None }
    }

    pub fn householder(v: DVector<f64>) -> Result<Self> {
        check_unit(&v)?;
        Ok(Self { kind: ActivationKind::Householder, group_size: v.len(), householder_v: Some(v) })
    }

    fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(LipError::Dimension("group size must be positive".into()));
        }
        match self.kind {
            ActivationKind::MaxMin if self.group_size != 2 => Err(LipError::Dimension(format!(
                "maxmin requires group size 2, got {}",
                self.group_size
            ))),
            ActivationKind::Householder => {
                let v = self
                    .householder_v
                    .as_ref()
                    .ok_or_else(|| LipError::Value("householder activation needs v".into()))?;
                if v.len() != self.group_size {
                    return Err(LipError::Dimension(format!(
                        "householder v has length {}, group size is {}",
                        v.len(),
                        self.group_size
                    )));
                }
                check_unit(v)
            }
            _ => Ok(()),
        }
    }

    /// Checks that the activation can act on a vector of length `width`.
    pub fn check_width(&self, width: usize) -> Result<()> {
        if self.kind == ActivationKind::FullSort && self.group_size != width {
            return Err(LipError::Dimension(format!(
                "fullsort group size {} differs from layer width {width}",
                self.group_size
            )));
        }
        if width % self.group_size != 0 {
            return Err(LipError::Dimension(format!(
                "group size {} does not divide width {width}",
                self.group_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "feedforward")]
    Feedforward,
    #[serde(rename = "residual")]
    Residual,
    #[serde(rename = "single_residual")]
    SingleLayerResidual,
    #[serde(rename = "deq")]
    Deq,
    #[serde(rename = "node")]
    NeuralOde,
}

impl Architecture {
    pub fn is_explicit(self) -> bool {
        !matches!(self, Self::Deq | Self::NeuralOde)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Option<ActivationSpec>,
    /// `G_i` of a residual layer.
    pub residual: Option<DMatrix<f64>>,
}

impl Layer {
    pub fn affine(weight: DMatrix<f64>, bias: DVector<f64>) -> Self {
        Self { weight, bias, activation: None, residual: None }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Width of the map's output (the residual stream width for residual layers).
    pub fn out_dim(&self) -> usize {
        match &self.residual {
            Some(g) => g.nrows(),
            None => self.weight.nrows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeqParams {
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub w_out: DMatrix<f64>,
    pub b_z: DVector<f64>,
    pub b_y: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeParams {
    pub g: DMatrix<f64>,
    pub w0: DMatrix<f64>,
    pub w1: DVector<f64>,
    pub b0: DVector<f64>,
    pub b1: DVector<f64>,
    pub t_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleResidualParams {
    pub h1: DMatrix<f64>,
    pub g1: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub activation: Option<ActivationSpec>,
    pub layers: Vec<Layer>,
    pub deq: Option<DeqParams>,
    pub node: Option<NodeParams>,
    pub single_res: Option<SingleResidualParams>,
}

/// Fixed-point solution of a deep equilibrium model.
#[derive(Debug, Clone)]
pub struct DeqSolution {
    pub z: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

pub const DEQ_DAMPING: f64 = 0.5;
pub const DEQ_TOL: f64 = 1e-10;
pub const DEQ_MAX_ITERS: usize = 100_000;
pub const NODE_STEP: f64 = 0.01;

fn check_dims(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(LipError::Dimension(format!(
            "{what}: expected {}x{}, got {}x{}",
            want.0, want.1, got.0, got.1
        )));
    }
    Ok(())
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(LipError::Dimension(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

fn check_finite_m(what: &str, m: &DMatrix<f64>) -> Result<()> {
    if !is_finite_matrix(m) {
        return Err(LipError::Value(format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn check_finite_v(what: &str, v: &DVector<f64>) -> Result<()> {
    if !is_finite_vector(v) {
        return Err(LipError::Value(format!("{what} has non-finite entries")));
    }
    Ok(())
}

impl Model {
    /// Feedforward network: every layer but the last is followed by `activation`.
    pub fn feedforward(
        layers: Vec<(DMatrix<f64>, DVector<f64>)>,
        activation: Option<ActivationSpec>,
    ) -> Result<Self> {
        let n = layers.len();
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, (w, b))| Layer {
                weight: w,
                bias: b,
                activation: if i + 1 < n { activation.clone() } else { None },
                residual: None,
            })
            .collect();
        let model = Self {
            arch: Architecture::Feedforward,
            activation,
            layers,
            deq: None,
            node: None,
            single_res: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Residual network from prebuilt layers (residual layers carry `G`).
    pub fn residual(mut layers: Vec<Layer>, activation: ActivationSpec) -> Result<Self> {
        for layer in &mut layers {
            layer.activation = layer.residual.as_ref().map(|_| activation.clone());
        }
        let model = Self {
            arch: Architecture::Residual,
            activation: Some(activation),
            layers,
            deq: None,
            node: None,
            single_res: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn single_residual(params: SingleResidualParams, activation: ActivationSpec) -> Result<Self> {
        let model = Self {
            arch: Architecture::SingleLayerResidual,
            activation: Some(activation),
            layers: Vec::new(),
            deq: None,
            node: None,
            single_res: Some(params),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn deq(params: DeqParams, activation: ActivationSpec) -> Result<Self> {
        let model = Self {
            arch: Architecture::Deq,
            activation: Some(activation),
            layers: Vec::new(),
            deq: Some(params),
            node: None,
            single_res: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn node(params: NodeParams, activation: ActivationSpec) -> Result<Self> {
        let model = Self {
            arch: Architecture::NeuralOde,
            activation: Some(activation),
            layers: Vec::new(),
            deq: None,
            node: Some(params),
            single_res: None,
        };
        model.validate()?;
        Ok(model)
    }

    fn activation_or_err(&self) -> Result<&ActivationSpec> {
        self.activation
            .as_ref()
            .ok_or_else(|| LipError::Value(format!("{:?} model requires an activation", self.arch)))
    }

    /// Checks every structural invariant of the architecture.
    pub fn validate(&self) -> Result<()> {
        if let Some(act) = &self.activation {
            act.validate()?;
        }
        match self.arch {
            Architecture::Feedforward => self.validate_feedforward(),
            Architecture::Residual => self.validate_residual(),
            Architecture::SingleLayerResidual => {
                let act = self.activation_or_err()?;
                let p = self
                    .single_res
                    .as_ref()
                    .ok_or_else(|| LipError::Parse("single_residual model needs \"single_res\"".into()))?;
                let (n1, n0) = p.w1.shape();
                check_dims("single_res.H1", p.h1.shape(), (p.g1.nrows(), n0))?;
                check_dims("single_res.G1", p.g1.shape(), (p.h1.nrows(), n1))?;
                check_len("single_res.b1", p.b1.len(), n1)?;
                act.check_width(n1)?;
                for (name, m) in [("H1", &p.h1), ("G1", &p.g1), ("W1", &p.w1)] {
                    check_finite_m(name, m)?;
                }
                check_finite_v("b1", &p.b1)
            }
            Architecture::Deq => {
                let act = self.activation_or_err()?;
                let p = self
                    .deq
                    .as_ref()
                    .ok_or_else(|| LipError::Parse("deq model needs \"deq\"".into()))?;
                let d = p.w.nrows();
                check_dims("deq.W", p.w.shape(), (d, d))?;
                check_len("deq.U rows", p.u.nrows(), d)?;
                check_len("deq.Wo cols", p.w_out.ncols(), d)?;
                check_len("deq.bz", p.b_z.len(), d)?;
                check_len("deq.by", p.b_y.len(), p.w_out.nrows())?;
                act.check_width(d)?;
                for (name, m) in [("W", &p.w), ("U", &p.u), ("Wo", &p.w_out)] {
                    check_finite_m(name, m)?;
                }
                check_finite_v("bz", &p.b_z)?;
                check_finite_v("by", &p.b_y)
            }
            Architecture::NeuralOde => {
                let act = self.activation_or_err()?;
                let p = self
                    .node
                    .as_ref()
                    .ok_or_else(|| LipError::Parse("node model needs \"node\"".into()))?;
                let n = p.w0.ncols();
                check_dims("node.W0", p.w0.shape(), (n, n))?;
                check_dims("node.G", p.g.shape(), (n, n))?;
                check_len("node.W1", p.w1.len(), n)?;
                check_len("node.b0", p.b0.len(), n)?;
                check_len("node.b1", p.b1.len(), n)?;
                act.check_width(n)?;
                if !(p.t_final.is_finite() && p.t_final > 0.0) {
                    return Err(LipError::Value(format!("node.t_final must be positive, got {}", p.t_final)));
                }
                check_finite_m("G", &p.g)?;
                check_finite_m("W0", &p.w0)?;
                for (name, v) in [("W1", &p.w1), ("b0", &p.b0), ("b1", &p.b1)] {
                    check_finite_v(name, v)?;
                }
                Ok(())
            }
        }
    }

    fn validate_feedforward(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(LipError::Dimension("feedforward model has no layers".into()));
        }
        if self.layers.len() > 1 {
            self.activation_or_err()?;
        }
        let last = self.layers.len() - 1;
        let mut width = self.layers[0].in_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            self.check_layer_common(i, layer, width)?;
            if layer.residual.is_some() {
                return Err(LipError::Value(format!("feedforward layer {i} carries G")));
            }
            match (&layer.activation, i == last) {
                (Some(_), true) => {
                    return Err(LipError::Value("final layer must be affine".into()));
                }
                (None, false) => {
                    return Err(LipError::Value(format!("hidden layer {i} has no activation")));
                }
                (Some(act), false) => {
                    if Some(act) != self.activation.as_ref() {
                        return Err(LipError::Value(format!(
                            "layer {i} activation differs from the model activation"
                        )));
                    }
                    act.check_width(layer.weight.nrows())?;
                }
                (None, true) => {}
            }
            width = layer.weight.nrows();
        }
        Ok(())
    }

    fn validate_residual(&self) -> Result<()> {
        let act = self.activation_or_err()?;
        if self.layers.is_empty() {
            return Err(LipError::Dimension("residual model has no layers".into()));
        }
        let mut width = self.layers[0].in_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            self.check_layer_common(i, layer, width)?;
            match &layer.residual {
                Some(g) => {
                    check_dims(&format!("layer {i} G"), g.shape(), (width, layer.weight.nrows()))?;
                    check_finite_m("G", g)?;
                    if layer.activation.as_ref() != Some(act) {
                        return Err(LipError::Value(format!("residual layer {i} must use the model activation")));
                    }
                    act.check_width(layer.weight.nrows())?;
                }
                None => {
                    if layer.activation.is_some() {
                        return Err(LipError::Value(format!(
                            "layer {i}: activations are only allowed on residual layers"
                        )));
                    }
                    width = layer.weight.nrows();
                }
            }
        }
        Ok(())
    }

    fn check_layer_common(&self, i: usize, layer: &Layer, width: usize) -> Result<()> {
        if layer.weight.nrows() == 0 || layer.weight.ncols() == 0 {
            return Err(LipError::Dimension(format!("layer {i} has an empty weight")));
        }
        if layer.in_dim() != width {
            return Err(LipError::Dimension(format!(
                "layer {i} expects input width {}, previous layer produces {width}",
                layer.in_dim()
            )));
        }
        check_len(&format!("layer {i} bias"), layer.bias.len(), layer.weight.nrows())?;
        check_finite_m(&format!("layer {i} W"), &layer.weight)?;
        check_finite_v(&format!("layer {i} b"), &layer.bias)
    }

    pub fn input_dim(&self) -> usize {
        match self.arch {
            Architecture::Feedforward | Architecture::Residual => self.layers[0].in_dim(),
            Architecture::SingleLayerResidual => self.single_res.as_ref().map_or(0, |p| p.w1.ncols()),
            Architecture::Deq => self.deq.as_ref().map_or(0, |p| p.u.ncols()),
            Architecture::NeuralOde => self.node.as_ref().map_or(0, |p| p.w0.ncols()),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.arch {
            Architecture::Feedforward | Architecture::Residual => {
                let mut width = self.input_dim();
                for layer in &self.layers {
                    width = layer.out_dim();
                }
                width
            }
            Architecture::SingleLayerResidual => self.single_res.as_ref().map_or(0, |p| p.h1.nrows()),
            Architecture::Deq => self.deq.as_ref().map_or(0, |p| p.w_out.nrows()),
            Architecture::NeuralOde => self.input_dim(),
        }
    }

    /// Widths `n_1..n_{l-1}` of the activated layers of a feedforward network.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.activation.is_some())
            .map(|l| l.weight.nrows())
            .collect()
    }

    /// Keeps only output row `label` of the final affine layer.
    pub fn select_output(&self, label: usize) -> Result<Self> {
        let mut out = self.clone();
        let last = out
            .layers
            .last_mut()
            .filter(|l| l.residual.is_none() && l.activation.is_none())
            .ok_or_else(|| LipError::Unsupported("output selection needs a final affine layer".into()))?;
        if label >= last.weight.nrows() {
            return Err(LipError::Value(format!(
                "label {label} out of range for {} outputs",
                last.weight.nrows()
            )));
        }
        last.weight = last.weight.rows(label, 1).into_owned();
        last.bias = DVector::from_element(1, last.bias[label]);
        Ok(out)
    }

    /// Multiplies every weight matrix (not the biases) by `s`.
    pub fn scale_weights(&self, s: f64) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            layer.weight *= s;
        }
        out
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("input", x.len(), self.input_dim())?;
        match self.arch {
            Architecture::Feedforward | Architecture::Residual => {
                let mut h = x.clone();
                for layer in &self.layers {
                    h = apply_layer(layer, &h)?;
                }
                Ok(h)
            }
            Architecture::SingleLayerResidual => {
                let p = self.single_res.as_ref().expect("validated");
                let act = self.activation_or_err()?;
                let pre = &p.w1 * x + &p.b1;
                Ok(&p.h1 * x + &p.g1 * activations::apply(act, &pre)?)
            }
            Architecture::Deq => {
                let p = self.deq.as_ref().expect("validated");
                let sol = self.deq_fixed_point(x)?;
                Ok(&p.w_out * sol.z + &p.b_y)
            }
            Architecture::NeuralOde => self.node_flow(x),
        }
    }

    /// Pre- and post-activation vectors of every activated layer.
    pub fn forward_trace(&self, x: &DVector<f64>) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
        if !matches!(self.arch, Architecture::Feedforward | Architecture::Residual) {
            return Err(LipError::Unsupported("trace is defined for layered models".into()));
        }
        check_len("input", x.len(), self.input_dim())?;
        let mut trace = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            if let Some(act) = &layer.activation {
                let pre = &layer.weight * &h + &layer.bias;
                let post = activations::apply(act, &pre)?;
                trace.push((pre, post));
            }
            h = apply_layer(layer, &h)?;
        }
        Ok(trace)
    }

    /// Damped Picard iteration `z <- (1-a) z + a phi(W z + U x + bz)`.
    pub fn deq_fixed_point(&self, x: &DVector<f64>) -> Result<DeqSolution> {
        let p = self
            .deq
            .as_ref()
            .ok_or_else(|| LipError::Unsupported("not a deq model".into()))?;
        let act = self.activation_or_err()?;
        check_len("input", x.len(), p.u.ncols())?;
        let drive = &p.u * x + &p.b_z;
        let mut z = DVector::zeros(p.w.nrows());
        for it in 0..DEQ_MAX_ITERS {
            let target = activations::apply(act, &(&p.w * &z + &drive))?;
            let residual = (&target - &z).norm();
            if !residual.is_finite() {
                break;
            }
            if residual <= DEQ_TOL {
                return Ok(DeqSolution { z: target, iterations: it, residual });
            }
            z = z * (1.0 - DEQ_DAMPING) + target * DEQ_DAMPING;
        }
        Err(LipError::Convergence(format!(
            "deq fixed-point iteration exceeded {DEQ_MAX_ITERS} iterations"
        )))
    }

    /// Classical RK4 with fixed step `NODE_STEP` on `[0, t_final]`.
    pub fn node_flow(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self
            .node
            .as_ref()
            .ok_or_else(|| LipError::Unsupported("not a neural ODE model".into()))?;
        let act = self.activation_or_err()?;
        check_len("input", x.len(), p.w0.ncols())?;
        let field = |z: &DVector<f64>, t: f64| -> Result<DVector<f64>> {
            let pre = &p.w0 * z + &p.w1 * t + &p.b0;
            Ok(&p.g * activations::apply(act, &pre)? + &p.b1)
        };
        let steps = ((p.t_final / NODE_STEP).round() as usize).max(1);
        let h = p.t_final / steps as f64;
        let mut z = x.clone();
        for k in 0..steps {
            let t = k as f64 * h;
            let k1 = field(&z, t)?;
            let k2 = field(&(&z + &k1 * (h / 2.0)), t + h / 2.0)?;
            let k3 = field(&(&z + &k2 * (h / 2.0)), t + h / 2.0)?;
            let k4 = field(&(&z + &k3 * h), t + h)?;
            z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        Ok(z)
    }

    /// Exact Jacobian of an explicit model at `x`.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len("input", x.len(), self.input_dim())?;
        match self.arch {
            Architecture::Feedforward | Architecture::Residual => {
                let mut h = x.clone();
                let mut jac = DMatrix::identity(x.len(), x.len());
                for layer in &self.layers {
                    let local = match (&layer.activation, &layer.residual) {
                        (Some(act), res) => {
                            let pre = &layer.weight * &h + &layer.bias;
                            let d = activations::jacobian_factor(act, &pre)?;
                            match res {
                                Some(g) => {
                                    DMatrix::identity(h.len(), h.len()) + g * d * &layer.weight
                                }
                                None => d * &layer.weight,
                            }
                        }
                        (None, _) => layer.weight.clone(),
                    };
                    jac = local * jac;
                    h = apply_layer(layer, &h)?;
                }
                Ok(jac)
            }
            Architecture::SingleLayerResidual => {
                let p = self.single_res.as_ref().expect("validated");
                let act = self.activation_or_err()?;
                let d = activations::jacobian_factor(act, &(&p.w1 * x + &p.b1))?;
                Ok(&p.h1 + &p.g1 * d * &p.w1)
            }
            Architecture::Deq | Architecture::NeuralOde => Err(LipError::Unsupported(
                "implicit models only provide finite-difference Jacobians".into(),
            )),
        }
    }

    /// Central finite-difference Jacobian with step `h`; works for every architecture.
    pub fn jacobian_fd(&self, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            cols.push((self.forward(&xp)? - self.forward(&xm)?) / (2.0 * h));
        }
        Ok(DMatrix::from_columns(&cols))
    }
}

fn apply_layer(layer: &Layer, h: &DVector<f64>) -> Result<DVector<f64>> {
    let pre = &layer.weight * h + &layer.bias;
    match (&layer.activation, &layer.residual) {
        (Some(act), Some(g)) => Ok(h + g * activations::apply(act, &pre)?),
        (Some(act), None) => activations::apply(act, &pre),
        (None, _) => Ok(pre),
    }
}

// ---------------------------------------------------------------------------
// JSON format

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawActivation {
    kind: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    #[serde(default)]
    b: Option<Vec<f64>>,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    g: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDeq {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    #[serde(rename = "U")]
    u: Vec<Vec<f64>>,
    #[serde(rename = "Wo")]
    w_out: Vec<Vec<f64>>,
    #[serde(default)]
    bz: Option<Vec<f64>>,
    #[serde(default)]
    by: Option<Vec<f64>>,
}

/// `W1` may be written as a flat vector or as an `n x 1` matrix.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawColumn {
    Flat(Vec<f64>),
    Column(Vec<Vec<f64>>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    #[serde(rename = "G")]
    g: Vec<Vec<f64>>,
    #[serde(rename = "W0")]
    w0: Vec<Vec<f64>>,
    #[serde(rename = "W1", default)]
    w1: Option<RawColumn>,
    #[serde(default)]
    b0: Option<Vec<f64>>,
    #[serde(default)]
    b1: Option<Vec<f64>>,
    #[serde(default)]
    t_final: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSingleRes {
    #[serde(rename = "H1")]
    h1: Vec<Vec<f64>>,
    #[serde(rename = "G1")]
    g1: Vec<Vec<f64>>,
    #[serde(rename = "W1")]
    w1: Vec<Vec<f64>>,
    #[serde(default)]
    b1: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    arch: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<RawActivation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    layers: Vec<RawLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    deq: Option<RawDeq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<RawNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    single_res: Option<RawSingleRes>,
}

fn vector_or_zeros(v: Option<Vec<f64>>, n: usize) -> DVector<f64> {
    v.map_or_else(|| DVector::zeros(n), DVector::from_vec)
}

/// Width the activation acts on, used to infer omitted group sizes.
fn activation_width(raw: &RawModel) -> Option<usize> {
    match raw.arch {
        Architecture::Feedforward => raw.layers.first().map(|l| l.w.len()),
        Architecture::Residual => raw.layers.iter().find(|l| l.g.is_some()).map(|l| l.w.len()),
        Architecture::SingleLayerResidual => raw.single_res.as_ref().map(|p| p.w1.len()),
        Architecture::Deq => raw.deq.as_ref().map(|p| p.w.len()),
        Architecture::NeuralOde => raw.node.as_ref().map(|p| p.w0.len()),
    }
}

fn parse_activation(raw: &RawActivation, width: Option<usize>) -> Result<ActivationSpec> {
    let v = raw.v.clone().map(DVector::from_vec);
    let group_size = match (raw.kind, raw.group_size) {
        (_, Some(g)) => g,
        (ActivationKind::MaxMin, None) => 2,
        (ActivationKind::Relu, None) => 1,
        (ActivationKind::Householder, None) => v.as_ref().map_or(0, DVector::len),
        (ActivationKind::FullSort, None) => width.unwrap_or(0),
        (ActivationKind::GroupSort, None) => {
            return Err(LipError::Parse("groupsort activation needs \"group_size\"".into()));
        }
    };
    if raw.kind == ActivationKind::Householder && v.is_none() {
        return Err(LipError::Parse("householder activation needs \"v\"".into()));
    }
    let spec = ActivationSpec { kind: raw.kind, group_size, householder_v: v };
    spec.validate()?;
    Ok(spec)
}

fn model_from_raw(raw: RawModel) -> Result<Model> {
    let activation = raw
        .activation
        .as_ref()
        .map(|a| parse_activation(a, activation_width(&raw)))
        .transpose()?;
    let mut model = Model {
        arch: raw.arch,
        activation: activation.clone(),
        layers: Vec::new(),
        deq: None,
        node: None,
        single_res: None,
    };
    let n_layers = raw.layers.len();
    for (i, l) in raw.layers.into_iter().enumerate() {
        let weight = matrix_from_rows(&l.w, &format!("layer {i} W"))?;
        let bias = vector_or_zeros(l.b, weight.nrows());
        let residual = l.g.map(|g| matrix_from_rows(&g, &format!("layer {i} G"))).transpose()?;
        let act = match raw.arch {
            Architecture::Feedforward if i + 1 < n_layers => activation.clone(),
            Architecture::Residual if residual.is_some() => activation.clone(),
            _ => None,
        };
        model.layers.push(Layer { weight, bias, activation: act, residual });
    }
    if let Some(d) = raw.deq {
        let w = matrix_from_rows(&d.w, "deq.W")?;
        let w_out = matrix_from_rows(&d.w_out, "deq.Wo")?;
        model.deq = Some(DeqParams {
            b_z: vector_or_zeros(d.bz, w.nrows()),
            b_y: vector_or_zeros(d.by, w_out.nrows()),
            u: matrix_from_rows(&d.u, "deq.U")?,
            w,
            w_out,
        });
    }
    if let Some(n) = raw.node {
        let w0 = matrix_from_rows(&n.w0, "node.W0")?;
        let g = matrix_from_rows(&n.g, "node.G")?;
        let w1 = match n.w1 {
            None => DVector::zeros(w0.nrows()),
            Some(RawColumn::Flat(v)) => DVector::from_vec(v),
            Some(RawColumn::Column(rows)) => {
                let m = matrix_from_rows(&rows, "node.W1")?;
                if m.ncols() != 1 {
                    return Err(LipError::Dimension("node.W1 must have a single column".into()));
                }
                m.column(0).into_owned()
            }
        };
        model.node = Some(NodeParams {
            b0: vector_or_zeros(n.b0, w0.nrows()),
            b1: vector_or_zeros(n.b1, g.nrows()),
            t_final: n.t_final.unwrap_or(1.0),
            g,
            w0,
            w1,
        });
    }
    if let Some(s) = raw.single_res {
        let w1 = matrix_from_rows(&s.w1, "single_res.W1")?;
        model.single_res = Some(SingleResidualParams {
            b1: vector_or_zeros(s.b1, w1.nrows()),
            h1: matrix_from_rows(&s.h1, "single_res.H1")?,
            g1: matrix_from_rows(&s.g1, "single_res.G1")?,
            w1,
        });
    }
    model.validate()?;
    Ok(model)
}

fn model_to_raw(model: &Model) -> RawModel {
    let vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<_>>();
    RawModel {
        arch: model.arch,
        activation: model.activation.as_ref().map(|a| RawActivation {
            kind: a.kind,
            group_size: Some(a.group_size),
            v: a.householder_v.as_ref().map(vec),
        }),
        layers: model
            .layers
            .iter()
            .map(|l| RawLayer {
                w: matrix_to_rows(&l.weight),
                b: Some(vec(&l.bias)),
                g: l.residual.as_ref().map(matrix_to_rows),
            })
            .collect(),
        deq: model.deq.as_ref().map(|d| RawDeq {
            w: matrix_to_rows(&d.w),
            u: matrix_to_rows(&d.u),
            w_out: matrix_to_rows(&d.w_out),
            bz: Some(vec(&d.b_z)),
            by: Some(vec(&d.b_y)),
        }),
        node: model.node.as_ref().map(|n| RawNode {
            g: matrix_to_rows(&n.g),
            w0: matrix_to_rows(&n.w0),
            w1: Some(RawColumn::Flat(vec(&n.w1))),
            b0: Some(vec(&n.b0)),
            b1: Some(vec(&n.b1)),
            t_final: Some(n.t_final),
        }),
        single_res: model.single_res.as_ref().map(|s| RawSingleRes {
            h1: matrix_to_rows(&s.h1),
            g1: matrix_to_rows(&s.g1),
            w1: matrix_to_rows(&s.w1),
            b1: Some(vec(&s.b1)),
        }),
    }
}

impl Model {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawModel = serde_json::from_str(text).map_err(|e| LipError::Parse(e.to_string()))?;
        model_from_raw(raw)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&model_to_raw(self)).expect("model serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

/// Reads and validates a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    Model::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn parses_two_layer_maxmin() {
        let text = r#"{"arch":"feedforward","activation":{"kind":"maxmin","group_size":2},
            "layers":[{"W":[[1,0],[0,1]],"b":[0,0]},{"W":[[1,1]],"b":[0]}]}"#;
        let m = Model::from_json_str(text).unwrap();
        assert_eq!(m.input_dim(), 2);
        assert_eq!(m.hidden_widths(), vec![2]);
        assert_eq!(m.output_dim(), 1);
        let again = Model::from_json_str(&m.to_json_string()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_bad_group_size() {
        let text = r#"{"arch":"feedforward","activation":{"kind":"groupsort","group_size":3},
            "layers":[{"W":[[1,0],[0,1],[1,1],[0,0]],"b":[0,0,0,0]},{"W":[[1,1,1,1]],"b":[0]}]}"#;
        assert!(matches!(Model::from_json_str(text), Err(LipError::Dimension(_))));
    }

    #[test]
    fn rejects_non_unit_householder() {
        let text = r#"{"arch":"feedforward","activation":{"kind":"householder","group_size":2,"v":[1,1]},
            "layers":[{"W":[[1,0],[0,1]],"b":[0,0]},{"W":[[1,1]],"b":[0]}]}"#;
        assert!(matches!(Model::from_json_str(text), Err(LipError::Value(_))));
    }

    #[test]
    fn rejects_malformed_and_mismatched() {
        assert!(matches!(Model::from_json_str("{\"arch\":"), Err(LipError::Parse(_))));
        let chain = r#"{"arch":"feedforward","activation":{"kind":"maxmin"},
            "layers":[{"W":[[1,0],[0,1]]},{"W":[[1,1,1]]}]}"#;
        assert!(matches!(Model::from_json_str(chain), Err(LipError::Dimension(_))));
        let ragged = r#"{"arch":"feedforward","layers":[{"W":[[1,0],[1]]}]}"#;
        assert!(matches!(Model::from_json_str(ragged), Err(LipError::Dimension(_))));
    }

    #[test]
    fn forward_examples() {
        let ff = Model::feedforward(
            vec![(eye(2), DVector::zeros(2)), (eye(2), DVector::zeros(2))],
            Some(ActivationSpec::maxmin()),
        )
        .unwrap();
        assert_eq!(ff.forward(&dv(&[1.0, 2.0])).unwrap(), dv(&[2.0, 1.0]));

        let res = Model::residual(
            vec![Layer { weight: eye(2), bias: DVector::zeros(2), activation: None, residual: Some(eye(2)) }],
            ActivationSpec::maxmin(),
        )
        .unwrap();
        assert_eq!(res.forward(&dv(&[1.0, 2.0])).unwrap(), dv(&[3.0, 3.0]));

        let deq = Model::deq(
            DeqParams {
                w: DMatrix::zeros(2, 2),
                u: eye(2),
                w_out: eye(2),
                b_z: DVector::zeros(2),
                b_y: DVector::zeros(2),
            },
            ActivationSpec::maxmin(),
        )
        .unwrap();
        assert!((deq.forward(&dv(&[3.0, 1.0])).unwrap() - dv(&[3.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn deq_fixed_point_residual() {
        let w = DMatrix::from_row_slice(2, 2, &[0.2, -0.3, 0.1, 0.25]);
        let deq = Model::deq(
            DeqParams { w: w.clone(), u: eye(2), w_out: eye(2), b_z: dv(&[0.1, -0.2]), b_y: DVector::zeros(2) },
            ActivationSpec::maxmin(),
        )
        .unwrap();
        let x = dv(&[0.7, -1.3]);
        let sol = deq.deq_fixed_point(&x).unwrap();
        let fixed = activations::groupsort(&(&w * &sol.z + &x + dv(&[0.1, -0.2])), 2).unwrap();
        assert!((fixed - &sol.z).norm() <= 1e-9);
    }

    #[test]
    fn deq_divergence_reports_convergence_error() {
        let deq = Model::deq(
            DeqParams {
                w: eye(2) * 3.0,
                u: eye(2),
                w_out: eye(2),
                b_z: DVector::zeros(2),
                b_y: DVector::zeros(2),
            },
            ActivationSpec::maxmin(),
        )
        .unwrap();
        assert!(matches!(deq.forward(&dv(&[1.0, 0.5])), Err(LipError::Convergence(_))));
    }

    #[test]
    fn node_static_flow_is_identity() {
        let node = Model::node(
            NodeParams {
                g: DMatrix::zeros(2, 2),
                w0: eye(2),
                w1: DVector::zeros(2),
                b0: DVector::zeros(2),
                b1: DVector::zeros(2),
                t_final: 1.0,
            },
            ActivationSpec::maxmin(),
        )
        .unwrap();
        assert_eq!(node.forward(&dv(&[0.3, -2.0])).unwrap(), dv(&[0.3, -2.0]));
    }

    #[test]
    fn node_linear_region_matches_exponential() {
        // dz/dt = -phi(z) with z1 > z2 throughout: phi = identity, z(1) = e^{-1} x.
        let node = Model::node(
            NodeParams {
                g: -eye(2),
                w0: eye(2),
                w1: DVector::zeros(2),
                b0: DVector::zeros(2),
                b1: DVector::zeros(2),
                t_final: 1.0,
            },
            ActivationSpec::maxmin(),
        )
        .unwrap();
        let x = dv(&[2.0, 1.0]);
        let z = node.forward(&x).unwrap();
        assert!((z - x * (-1.0f64).exp()).norm() < 1e-9);
    }

    #[test]
    fn jacobian_examples() {
        let mm = Model::feedforward(
            vec![(eye(2), DVector::zeros(2)), (eye(2), DVector::zeros(2))],
            Some(ActivationSpec::maxmin()),
        )
        .unwrap();
        assert_eq!(
            mm.jacobian(&dv(&[1.0, 2.0])).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let hh = Model::feedforward(
            vec![(eye(2), DVector::zeros(2)), (eye(2), DVector::zeros(2))],
            Some(ActivationSpec::householder(dv(&[h, -h])).unwrap()),
        )
        .unwrap();
        assert_eq!(hh.jacobian(&dv(&[1.0, 0.0])).unwrap(), eye(2));
        let relu = Model::feedforward(
            vec![(eye(2), DVector::zeros(2)), (eye(2), DVector::zeros(2))],
            Some(ActivationSpec::relu()),
        )
        .unwrap();
        assert_eq!(relu.jacobian(&dv(&[-1.0, 2.0])).unwrap(), DMatrix::from_diagonal(&dv(&[0.0, 1.0])));
    }

    #[test]
    fn implicit_jacobian_unsupported() {
        let deq = Model::deq(
            DeqParams {
                w: DMatrix::zeros(2, 2),
                u: eye(2),
                w_out: eye(2),
                b_z: DVector::zeros(2),
                b_y: DVector::zeros(2),
            },
            ActivationSpec::maxmin(),
        )
        .unwrap();
        assert!(matches!(deq.jacobian(&dv(&[1.0, 0.0])), Err(LipError::Unsupported(_))));
        let fd = deq.jacobian_fd(&dv(&[1.0, 0.0]), 1e-6).unwrap();
        assert!((fd - eye(2)).amax() < 1e-6);
    }

    #[test]
    fn select_output_row() {
        let m = Model::feedforward(
            vec![
                (eye(2), DVector::zeros(2)),
                (DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), dv(&[5.0, 6.0])),
            ],
            Some(ActivationSpec::maxmin()),
        )
        .unwrap();
        let s = m.select_output(1).unwrap();
        assert_eq!(s.layers[1].weight, DMatrix::from_row_slice(1, 2, &[3.0, 4.0]));
        assert_eq!(s.layers[1].bias, dv(&[6.0]));
        assert!(matches!(m.select_output(2), Err(LipError::Value(_))));
    }
}
