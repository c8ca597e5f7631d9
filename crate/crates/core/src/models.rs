//! Explicit and implicit multi-layer recurrent models.
//!
//! The explicit model updates its state through `L` layers
//! `z⁰ = x`, `zˡ⁺¹ = φ(Aₗ zˡ + Bₗ u + bₗ)`, `x⁺ = zᴸ`, and reads out
//! `y = C x + D u`. The implicit model uses the redundant form
//! `E₀ h⁰ = x`, `Eₗ₊₁ hˡ⁺¹ = φ(Wₗ hˡ + Bₗ u + bₗ)`, `x⁺ = E_L hᴸ`. Both describe
//! the same model set through `Aₗ = Wₗ Eₗ⁻¹`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::linalg::{all_finite, matrix_serde, matrix_vec_serde, vector_vec_serde};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model class: unconstrained explicit, spectrally constrained explicit,
/// contracting implicit, or unconstrained implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "rnn")]
    Rnn,
    #[serde(rename = "s-rnn")]
    SRnn,
    #[serde(rename = "ci-rnn")]
    CiRnn,
    #[serde(rename = "implicit")]
    Implicit,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::SRnn => "s-rnn",
            ModelKind::CiRnn => "ci-rnn",
            ModelKind::Implicit => "implicit",
        }
    }

    pub fn is_implicit(self) -> bool {
        matches!(self, ModelKind::CiRnn | ModelKind::Implicit)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "rnn" => Ok(ModelKind::Rnn),
            "s-rnn" | "srnn" => Ok(ModelKind::SRnn),
            "ci-rnn" | "cirnn" => Ok(ModelKind::CiRnn),
            "implicit" => Ok(ModelKind::Implicit),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Scalar slope-restricted nonlinearity applied elementwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative, with the ReLU kink resolved to slope 0.
    #[inline]
    pub fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn apply(self, z: &DVector<f64>) -> DVector<f64> {
        z.map(|v| self.eval(v))
    }

    /// Diagonal matrix of elementwise slopes at `z`.
    pub fn slope_matrix(self, z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&z.map(|v| self.slope(v)))
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// State, input and output sizes plus the hidden widths `n₀..n_L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub widths: Vec<usize>,
}

impl LayerDims {
    /// Every hidden layer as wide as the state.
    pub fn uniform(n_x: usize, n_u: usize, n_y: usize, layers: usize) -> Self {
        LayerDims { n_x, n_u, n_y, widths: vec![n_x; layers + 1] }
    }

    pub fn layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Dimension("at least one layer is required".into()));
        }
        if self.widths.contains(&0) || self.n_x == 0 {
            return Err(Error::Dimension("all widths must be positive".into()));
        }
        if self.widths[0] != self.n_x || *self.widths.last().unwrap() != self.n_x {
            return Err(Error::Dimension(format!(
                "first and last widths must equal n_x = {}, got {:?}",
                self.n_x, self.widths
            )));
        }
        Ok(())
    }
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_len(name: &str, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Dimension(format!("{name} has length {}, expected {len}", v.len())));
    }
    Ok(())
}

/// Weights of the explicit model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitParams {
    #[serde(with = "matrix_vec_serde")]
    pub a: Vec<DMatrix<f64>>,
    #[serde(with = "matrix_vec_serde")]
    pub b: Vec<DMatrix<f64>>,
    #[serde(with = "vector_vec_serde")]
    pub bias: Vec<DVector<f64>>,
    #[serde(with = "matrix_serde")]
    pub c: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub d: DMatrix<f64>,
}

impl ExplicitParams {
    pub fn zeros(dims: &LayerDims) -> Self {
        let l = dims.layers();
        let w = &dims.widths;
        ExplicitParams {
            a: (0..l).map(|i| DMatrix::zeros(w[i + 1], w[i])).collect(),
            b: (0..l).map(|i| DMatrix::zeros(w[i + 1], dims.n_u)).collect(),
            bias: (0..l).map(|i| DVector::zeros(w[i + 1])).collect(),
            c: DMatrix::zeros(dims.n_y, dims.n_x),
            d: DMatrix::zeros(dims.n_y, dims.n_u),
        }
    }

    pub fn dims(&self) -> LayerDims {
        let mut widths: Vec<usize> = self.a.iter().map(|a| a.ncols()).collect();
        widths.push(self.a.last().map_or(0, |a| a.nrows()));
        LayerDims { n_x: self.c.ncols(), n_u: self.d.ncols(), n_y: self.c.nrows(), widths }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.validate()?;
        let w = &dims.widths;
        if self.b.len() != self.a.len() || self.bias.len() != self.a.len() {
            return Err(Error::Dimension("per-layer weight lists differ in length".into()));
        }
        for l in 0..dims.layers() {
            check_shape(&format!("A_{l}"), &self.a[l], w[l + 1], w[l])?;
            check_shape(&format!("B_{l}"), &self.b[l], w[l + 1], dims.n_u)?;
            check_len(&format!("b_{l}"), &self.bias[l], w[l + 1])?;
        }
        check_shape("D", &self.d, dims.n_y, dims.n_u)
    }

    /// Embeds the model as an implicit one with every `Eₗ = I`.
    pub fn to_implicit(&self) -> ImplicitParams {
        let dims = self.dims();
        ImplicitParams {
            e: dims.widths.iter().map(|&n| DMatrix::identity(n, n)).collect(),
            w: self.a.clone(),
            b: self.b.clone(),
            bias: self.bias.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
        }
    }
}

/// Weights of the implicit model. `e` holds `E₀..E_L` (L + 1 matrices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplicitParams {
    #[serde(with = "matrix_vec_serde")]
    pub e: Vec<DMatrix<f64>>,
    #[serde(with = "matrix_vec_serde")]
    pub w: Vec<DMatrix<f64>>,
    #[serde(with = "matrix_vec_serde")]
    pub b: Vec<DMatrix<f64>>,
    #[serde(with = "vector_vec_serde")]
    pub bias: Vec<DVector<f64>>,
    #[serde(with = "matrix_serde")]
    pub c: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub d: DMatrix<f64>,
}

impl ImplicitParams {
    pub fn dims(&self) -> LayerDims {
        LayerDims {
            n_x: self.c.ncols(),
            n_u: self.d.ncols(),
            n_y: self.c.nrows(),
            widths: self.e.iter().map(|e| e.nrows()).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.validate()?;
        let w = &dims.widths;
        let l = dims.layers();
        if self.w.len() != l || self.b.len() != l || self.bias.len() != l {
            return Err(Error::Dimension("per-layer weight lists differ in length".into()));
        }
        for (i, e) in self.e.iter().enumerate() {
            check_shape(&format!("E_{i}"), e, w[i], w[i])?;
        }
        for i in 0..l {
            check_shape(&format!("W_{i}"), &self.w[i], w[i + 1], w[i])?;
            check_shape(&format!("B_{i}"), &self.b[i], w[i + 1], dims.n_u)?;
            check_len(&format!("b_{i}"), &self.bias[i], w[i + 1])?;
        }
        check_shape("D", &self.d, dims.n_y, dims.n_u)
    }

    /// LU factors of every `Eₗ`, reused across the steps of a simulation.
    pub fn factorize(&self) -> Result<FactoredImplicit<'_>> {
        self.validate()?;
        let lus = self
            .e
            .iter()
            .enumerate()
            .map(|(layer, e)| {
                if e.is_identity(0.0) {
                    return Ok(None);
                }
                let lu = e.clone().lu();
                if !lu.is_invertible() || lu.u().diagonal().iter().any(|d| d.abs() < f64::MIN_POSITIVE) {
                    return Err(Error::SingularE { layer });
                }
                Ok(Some(lu))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FactoredImplicit { params: self, lus })
    }

    /// Equivalent explicit weights, `Aₗ = Wₗ Eₗ⁻¹`.
    pub fn to_explicit(&self) -> Result<ExplicitParams> {
        self.validate()?;
        let mut a = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            // A E = W  <=>  Eᵀ Aᵀ = Wᵀ
            let lu = self.e[l].transpose().lu();
            let at = lu.solve(&self.w[l].transpose()).ok_or(Error::SingularE { layer: l })?;
            if !all_finite(at.as_slice()) {
                return Err(Error::SingularE { layer: l });
            }
            a.push(at.transpose());
        }
        Ok(ExplicitParams {
            a,
            b: self.b.clone(),
            bias: self.bias.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
        })
    }
}

/// Implicit model with its `Eₗ` factorizations cached.
pub struct FactoredImplicit<'a> {
    params: &'a ImplicitParams,
    lus: Vec<Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>>,
}

impl FactoredImplicit<'_> {
    fn solve(&self, layer: usize, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.lus[layer] {
            None => Ok(rhs.clone()),
            Some(lu) => lu.solve(rhs).ok_or(Error::SingularE { layer }),
        }
    }
}

/// One step of the state recursion: next state and the per-layer hidden stack.
pub trait Dynamics {
    fn dims(&self) -> LayerDims;
    fn step(&self, act: Activation, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, Vec<DVector<f64>>)>;
    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
}

fn check_step_inputs(dims: &LayerDims, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    check_len("state", x, dims.n_x)?;
    check_len("input", u, dims.n_u)
}

impl Dynamics for ExplicitParams {
    fn dims(&self) -> LayerDims {
        ExplicitParams::dims(self)
    }

    fn step(&self, act: Activation, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        check_step_inputs(&ExplicitParams::dims(self), x, u)?;
        let mut hidden = Vec::with_capacity(self.a.len() + 1);
        let mut z = x.clone();
        for l in 0..self.a.len() {
            let pre = &self.a[l] * &z + &self.b[l] * u + &self.bias[l];
            hidden.push(z);
            z = act.apply(&pre);
        }
        hidden.push(z.clone());
        Ok((z, hidden))
    }

    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u
    }
}

impl Dynamics for FactoredImplicit<'_> {
    fn dims(&self) -> LayerDims {
        self.params.dims()
    }

    fn step(&self, act: Activation, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let p = self.params;
        check_step_inputs(&p.dims(), x, u)?;
        let layers = p.layers();
        let mut hidden = Vec::with_capacity(layers + 1);
        let mut h = self.solve(0, x)?;
        for l in 0..layers {
            let pre = &p.w[l] * &h + &p.b[l] * u + &p.bias[l];
            hidden.push(h);
            h = self.solve(l + 1, &act.apply(&pre))?;
        }
        let next = if self.lus[layers].is_none() { h.clone() } else { &p.e[layers] * &h };
        hidden.push(h);
        Ok((next, hidden))
    }

    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.params.c * x + &self.params.d * u
    }
}

pub fn step_explicit(
    p: &ExplicitParams,
    act: Activation,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    p.validate()?;
    p.step(act, x, u)
}

pub fn step_implicit(
    p: &ImplicitParams,
    act: Activation,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    p.factorize()?.step(act, x, u)
}

/// Simulated states, outputs and hidden activations.
///
/// `states[k]` and `outputs[k]` line up with `inputs[k]`; `hidden[k]` holds the
/// layer stack computed while stepping from `states[k]` to `states[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub inputs: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub hidden: Vec<Vec<DVector<f64>>>,
    /// Set when a non-finite value appeared; the sequences are then a prefix.
    pub diverged: bool,
}

pub fn simulate<M: Dynamics + ?Sized>(
    model: &M,
    act: Activation,
    u_seq: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<Trajectory> {
    if u_seq.is_empty() {
        return Err(Error::Dimension("input sequence is empty".into()));
    }
    let horizon = u_seq.len();
    let mut traj = Trajectory {
        inputs: Vec::with_capacity(horizon),
        states: Vec::with_capacity(horizon),
        outputs: Vec::with_capacity(horizon),
        hidden: Vec::with_capacity(horizon.saturating_sub(1)),
        diverged: false,
    };
    let mut x = x0.clone();
    for (k, u) in u_seq.iter().enumerate() {
        let y = model.output(&x, u);
        if !all_finite(x.as_slice()) || !all_finite(y.as_slice()) {
            traj.diverged = true;
            break;
        }
        traj.inputs.push(u.clone());
        traj.states.push(x.clone());
        traj.outputs.push(y);
        if k + 1 < horizon {
            let (next, hidden) = model.step(act, &x, u)?;
            traj.hidden.push(hidden);
            x = next;
        }
    }
    Ok(traj)
}

/// Either parametrization, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum ModelParams {
    Explicit(ExplicitParams),
    Implicit(ImplicitParams),
}

impl ModelParams {
    pub fn dims(&self) -> LayerDims {
        match self {
            ModelParams::Explicit(p) => p.dims(),
            ModelParams::Implicit(p) => p.dims(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Explicit(p) => p.validate(),
            ModelParams::Implicit(p) => p.validate(),
        }
    }

    pub fn simulate(&self, act: Activation, u_seq: &[DVector<f64>], x0: &DVector<f64>) -> Result<Trajectory> {
        match self {
            ModelParams::Explicit(p) => {
                p.validate()?;
                simulate(p, act, u_seq, x0)
            }
            ModelParams::Implicit(p) => simulate(&p.factorize()?, act, u_seq, x0),
        }
    }

    pub fn as_implicit(&self) -> ImplicitParams {
        match self {
            ModelParams::Explicit(p) => p.to_implicit(),
            ModelParams::Implicit(p) => p.clone(),
        }
    }

    pub fn to_explicit(&self) -> Result<ExplicitParams> {
        match self {
            ModelParams::Explicit(p) => Ok(p.clone()),
            ModelParams::Implicit(p) => p.to_explicit(),
        }
    }
}

/// Versioned on-disk model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub activation: Activation,
    pub dims: LayerDims,
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormStats>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, activation: Activation, params: ModelParams) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind,
            activation,
            dims: params.dims(),
            params,
            normalization: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.params.validate()?;
        if ck.params.dims() != ck.dims {
            return Err(Error::Format("declared dims disagree with weight shapes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn single_layer(a: DMatrix<f64>) -> ExplicitParams {
        let n = a.nrows();
        ExplicitParams {
            a: vec![a],
            b: vec![DMatrix::zeros(n, 0)],
            bias: vec![DVector::zeros(n)],
            c: DMatrix::identity(n, n),
            d: DMatrix::zeros(n, 0),
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.apply(&v(&[-1.0, 0.0, 2.0])), v(&[0.0, 0.0, 2.0]));
        assert_eq!(Activation::Identity.apply(&v(&[-3.5, 7.0])), v(&[-3.5, 7.0]));
        assert_eq!(Activation::Tanh.apply(&v(&[0.0])), v(&[0.0]));
    }

    #[test]
    fn activation_slopes() {
        let s = Activation::Relu.slope_matrix(&v(&[-1.0, 2.0]));
        assert_eq!(s, DMatrix::from_diagonal(&v(&[0.0, 1.0])));
        assert_eq!(Activation::Relu.slope(0.0), 0.0);
        assert_eq!(Activation::Tanh.slope_matrix(&v(&[0.0])), DMatrix::identity(1, 1));
        assert_eq!(Activation::Identity.slope_matrix(&v(&[4.0, -2.0, 0.0])), DMatrix::identity(3, 3));
    }

    #[test]
    fn explicit_linear_step() {
        let p = single_layer(DMatrix::identity(2, 2) * 0.5);
        let (next, hidden) = step_explicit(&p, Activation::Identity, &v(&[2.0, 4.0]), &v(&[])).unwrap();
        assert_eq!(next, v(&[1.0, 2.0]));
        assert_eq!(hidden.len(), 2);
    }

    #[test]
    fn explicit_relu_example_matrix() {
        let p = single_layer(DMatrix::from_row_slice(2, 2, &[0.8, 1.0, 0.0, 0.8]));
        let (next, _) = step_explicit(&p, Activation::Relu, &v(&[1.0, 1.0]), &v(&[])).unwrap();
        assert!((next - v(&[1.8, 0.8])).norm() < 1e-15);
    }

    #[test]
    fn origin_is_fixed_without_bias() {
        let dims = LayerDims::uniform(3, 2, 1, 2);
        let mut p = ExplicitParams::zeros(&dims);
        p.a[0] = DMatrix::from_fn(3, 3, |i, j| (i as f64) - (j as f64) * 0.3);
        p.a[1] = DMatrix::from_fn(3, 3, |i, j| 0.2 * (i + j) as f64);
        p.b[0] = DMatrix::from_element(3, 2, 0.7);
        let (next, _) = step_explicit(&p, Activation::Relu, &DVector::zeros(3), &DVector::zeros(2)).unwrap();
        assert_eq!(next, DVector::zeros(3));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = single_layer(DMatrix::identity(2, 2));
        assert!(matches!(
            step_explicit(&p, Activation::Relu, &v(&[1.0]), &v(&[])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn implicit_with_identity_e_matches_explicit_bitwise() {
        let dims = LayerDims { n_x: 2, n_u: 1, n_y: 1, widths: vec![2, 3, 2] };
        let mut p = ExplicitParams::zeros(&dims);
        p.a[0] = DMatrix::from_row_slice(3, 2, &[0.3, -0.2, 0.5, 0.1, -0.7, 0.4]);
        p.a[1] = DMatrix::from_row_slice(2, 3, &[0.2, 0.1, -0.3, 0.6, -0.4, 0.2]);
        p.b[0] = DMatrix::from_row_slice(3, 1, &[1.0, -1.0, 0.5]);
        p.bias[1] = v(&[0.1, -0.2]);
        let imp = p.to_implicit();
        let x = v(&[0.3, -1.1]);
        let u = v(&[0.7]);
        let (xe, _) = step_explicit(&p, Activation::Tanh, &x, &u).unwrap();
        let (xi, _) = step_implicit(&imp, Activation::Tanh, &x, &u).unwrap();
        assert_eq!(xe, xi);
    }

    #[test]
    fn implicit_constant_layer() {
        let c = v(&[0.4, -0.3]);
        let p = ImplicitParams {
            e: vec![DMatrix::identity(2, 2) * 2.0, DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 0.0, 2.0])],
            w: vec![DMatrix::zeros(2, 2)],
            b: vec![DMatrix::zeros(2, 0)],
            bias: vec![c.clone()],
            c: DMatrix::identity(2, 2),
            d: DMatrix::zeros(2, 0),
        };
        let (next, _) = step_implicit(&p, Activation::Relu, &v(&[5.0, 1.0]), &v(&[])).unwrap();
        assert!((next - v(&[0.4, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn singular_e_reports_layer() {
        let p = ImplicitParams {
            e: vec![DMatrix::identity(2, 2), DMatrix::zeros(2, 2)],
            w: vec![DMatrix::identity(2, 2)],
            b: vec![DMatrix::zeros(2, 0)],
            bias: vec![DVector::zeros(2)],
            c: DMatrix::identity(2, 2),
            d: DMatrix::zeros(2, 0),
        };
        assert!(matches!(
            step_implicit(&p, Activation::Relu, &v(&[1.0, 1.0]), &v(&[])),
            Err(Error::SingularE { layer: 1 })
        ));
        // E_L only rescales the last layer and drops out of the explicit form.
        assert!(p.to_explicit().is_ok());
        let mut q = p.clone();
        q.e[0] = DMatrix::zeros(2, 2);
        assert!(matches!(q.to_explicit(), Err(Error::SingularE { layer: 0 })));
    }

    #[test]
    fn conversion_scalar_cases() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut p = single_layer(w.clone()).to_implicit();
        assert_eq!(p.to_explicit().unwrap().a[0], w);
        p.e = vec![DMatrix::identity(2, 2) * 2.0; 2];
        assert!((p.to_explicit().unwrap().a[0].clone() - &w / 2.0).abs().max() < 1e-15);
    }

    #[test]
    fn geometric_decay() {
        let p = ExplicitParams {
            a: vec![DMatrix::from_element(1, 1, 0.5)],
            b: vec![DMatrix::zeros(1, 1)],
            bias: vec![DVector::zeros(1)],
            c: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::zeros(1, 1),
        };
        let u = vec![DVector::zeros(1); 10];
        let t = simulate(&p, Activation::Identity, &u, &v(&[1.0])).unwrap();
        assert_eq!(t.outputs.len(), 10);
        for (k, y) in t.outputs.iter().enumerate() {
            assert!((y[0] - 0.5f64.powi(k as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_model_zero_output() {
        let dims = LayerDims::uniform(3, 2, 2, 2);
        let p = ExplicitParams::zeros(&dims);
        let u: Vec<_> = (0..5).map(|k| DVector::from_element(2, k as f64)).collect();
        let t = simulate(&p, Activation::Relu, &u, &DVector::zeros(3)).unwrap();
        assert!(t.outputs.iter().all(|y| y.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn divergence_returns_prefix() {
        let p = ExplicitParams {
            a: vec![DMatrix::from_element(1, 1, 1e200)],
            b: vec![DMatrix::zeros(1, 0)],
            bias: vec![DVector::zeros(1)],
            c: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::zeros(1, 0),
        };
        let u = vec![DVector::zeros(0); 10];
        let t = simulate(&p, Activation::Identity, &u, &v(&[1.0])).unwrap();
        assert!(t.diverged);
        assert!(t.outputs.len() < 10 && !t.outputs.is_empty());
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = single_layer(DMatrix::identity(1, 1));
        assert!(simulate(&p, Activation::Relu, &[], &v(&[0.0])).is_err());
    }

    #[test]
    fn dims_validation() {
        assert!(LayerDims { n_x: 2, n_u: 1, n_y: 1, widths: vec![2, 5, 3] }.validate().is_err());
        assert!(LayerDims { n_x: 2, n_u: 1, n_y: 1, widths: vec![2] }.validate().is_err());
        assert!(LayerDims { n_x: 2, n_u: 1, n_y: 1, widths: vec![2, 5, 2] }.validate().is_ok());
    }
}
