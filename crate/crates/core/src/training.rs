//! Simulation-error training with the factorization penalty.
//!
//! The objective of one batch is `MSE + μ‖c‖²`, where `c` stacks
//! `vec(Mₗ − εI − LₗLₗᵀ)` over the constraint blocks of the model class:
//! contraction blocks for `ci-rnn`, unit spectral-norm blocks for `s-rnn`,
//! nothing for `rnn` and `implicit`. Gradients are computed by hand-written
//! backpropagation through time.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, LU};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contraction::{assemble_spectral, block_matrix, block_sensitivity, Certificate, DEFAULT_MARGIN};
use crate::data::{SeqDataset, Sequence, Split};
use crate::error::{Error, Result};
use crate::init::InitBundle;
use crate::linalg::{all_finite, psd_lower_factor};
use crate::models::{Activation, Checkpoint, ExplicitParams, ImplicitParams, ModelKind, ModelParams};
use crate::optim::Adam;

/// Floor applied to the metric entries after every update.
pub const P_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub mu0: f64,
    pub viol_tol: f64,
    pub penalty_factor: f64,
    pub patience: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// Sequences per gradient step.
    pub batch_size: usize,
    /// Leading validation steps excluded from the score.
    pub washout: usize,
    /// Learn one initial state per training sequence.
    pub train_x0: bool,
    /// After every step, minimize the penalty over the factors exactly by
    /// factoring the PSD part of `Mₗ − εI`; otherwise Adam updates them.
    pub refresh_factors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.5e-3,
            lr_decay: 0.96,
            mu0: 500.0,
            viol_tol: 1e-3,
            penalty_factor: 10.0,
            patience: 20,
            epsilon: DEFAULT_MARGIN,
            seed: 0,
            max_epochs: 200,
            batch_size: 1,
            washout: 0,
            train_x0: true,
            refresh_factors: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_decay", self.lr_decay),
            ("mu0", self.mu0),
            ("viol_tol", self.viol_tol),
            ("penalty_factor", self.penalty_factor),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        // a zero step size is allowed; it freezes the parameters for scripted runs
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if self.penalty_factor < 1.0 {
            return Err(Error::Config("penalty_factor below 1 would decrease the penalty".into()));
        }
        if self.patience < 1 || self.max_epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("patience, max_epochs and batch_size must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        Ok(())
    }

    /// Step size of epoch `epoch` before any divergence halving.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}

/// Everything that is optimized: weights, metric, factors and initial states.
///
/// Explicit classes are stored with every `Eₗ = I` (and `Wₗ = Aₗ`); their
/// `E` never enters the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainModel {
    pub kind: ModelKind,
    pub activation: Activation,
    pub params: ImplicitParams,
    pub lambda: f64,
    /// `P₀..P_{L−1}` (ci-rnn only).
    pub p: Vec<DVector<f64>>,
    /// Lower-triangular factors, one per constraint block.
    pub factors: Vec<DMatrix<f64>>,
    /// One initial state per training sequence.
    pub x0: Vec<DVector<f64>>,
}

impl TrainModel {
    /// Builds the trainable bundle; factors start at `chol(Mₗ − εI)`.
    pub fn new(
        kind: ModelKind,
        activation: Activation,
        params: &ModelParams,
        cert: Option<&Certificate>,
        lambda: f64,
        epsilon: f64,
        n_x0: usize,
    ) -> Result<Self> {
        params.validate()?;
        let implicit = if kind.is_implicit() {
            params.as_implicit()
        } else {
            params.to_explicit()?.to_implicit()
        };
        let dims = implicit.dims();
        let (p, lambda) = if kind == ModelKind::CiRnn {
            match cert {
                Some(c) => (c.p.clone(), c.lambda),
                None => (Certificate::identity(&dims.widths, lambda).p, lambda),
            }
        } else {
            (Vec::new(), lambda)
        };
        let mut model = TrainModel {
            kind,
            activation,
            params: implicit,
            lambda,
            p,
            factors: Vec::new(),
            x0: vec![DVector::zeros(dims.n_x); n_x0],
        };
        model.refresh_factors(epsilon);
        Ok(model)
    }

    pub fn from_bundle(bundle: &InitBundle, activation: Activation, lambda: f64, epsilon: f64, n_x0: usize) -> Result<Self> {
        TrainModel::new(bundle.kind, activation, &bundle.params, bundle.cert.as_ref(), lambda, epsilon, n_x0)
    }

    pub fn layers(&self) -> usize {
        self.params.layers()
    }

    fn p_at(&self, l: usize) -> DVector<f64> {
        if l == self.p.len() {
            &self.p[0] * self.lambda
        } else {
            self.p[l].clone()
        }
    }

    /// The assembled constraint blocks of the model class.
    pub fn blocks(&self) -> Vec<DMatrix<f64>> {
        match self.kind {
            ModelKind::CiRnn => (0..self.layers())
                .map(|l| {
                    let e = &self.params.e[l];
                    let top = e + e.transpose() - DMatrix::from_diagonal(&self.p[l]);
                    block_matrix(&top, &self.params.w[l], &self.p_at(l + 1))
                })
                .collect(),
            ModelKind::SRnn => self.params.w.iter().enumerate().map(|(l, a)| assemble_spectral(a, l).m).collect(),
            ModelKind::Rnn | ModelKind::Implicit => Vec::new(),
        }
    }

    /// Replaces every factor by the minimizer of `‖Mₗ − εI − LLᵀ‖_F`.
    pub fn refresh_factors(&mut self, epsilon: f64) {
        self.factors = self
            .blocks()
            .iter()
            .map(|m| psd_lower_factor(&(m - DMatrix::identity(m.nrows(), m.nrows()) * epsilon), 0.0))
            .collect();
    }

    /// `Mₗ − εI − LₗLₗᵀ` for every block.
    pub fn residuals(&self, epsilon: f64) -> Vec<DMatrix<f64>> {
        self.blocks()
            .iter()
            .zip(&self.factors)
            .map(|(m, f)| m - DMatrix::identity(m.nrows(), m.nrows()) * epsilon - f * f.transpose())
            .collect()
    }

    /// `‖c‖∞`, zero for unconstrained classes.
    pub fn c_inf(&self, epsilon: f64) -> f64 {
        self.residuals(epsilon).iter().map(|r| r.amax()).fold(0.0, f64::max)
    }

    pub fn model_params(&self) -> ModelParams {
        if self.kind.is_implicit() {
            ModelParams::Implicit(self.params.clone())
        } else {
            ModelParams::Explicit(ExplicitParams {
                a: self.params.w.clone(),
                b: self.params.b.clone(),
                bias: self.params.bias.clone(),
                c: self.params.c.clone(),
                d: self.params.d.clone(),
            })
        }
    }

    pub fn certificate(&self) -> Option<Certificate> {
        (self.kind == ModelKind::CiRnn).then(|| Certificate { p: self.p.clone(), lambda: self.lambda })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.kind, self.activation, self.model_params())
    }

    fn zeros_like(&self) -> TrainModel {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        let zv = |v: &DVector<f64>| DVector::zeros(v.len());
        let p = &self.params;
        TrainModel {
            kind: self.kind,
            activation: self.activation,
            params: ImplicitParams {
                e: p.e.iter().map(z).collect(),
                w: p.w.iter().map(z).collect(),
                b: p.b.iter().map(z).collect(),
                bias: p.bias.iter().map(zv).collect(),
                c: z(&p.c),
                d: z(&p.d),
            },
            lambda: self.lambda,
            p: self.p.iter().map(zv).collect(),
            factors: self.factors.iter().map(z).collect(),
            x0: self.x0.iter().map(zv).collect(),
        }
    }
}

/// A named tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    E(usize),
    W(usize),
    B(usize),
    Bias(usize),
    C,
    D,
    P(usize),
    Factor(usize),
    X0(usize),
}

impl std::fmt::Display for Slot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Slot::E(l) => write!(f, "E_{l}"),
            Slot::W(l) => write!(f, "W_{l}"),
            Slot::B(l) => write!(f, "B_{l}"),
            Slot::Bias(l) => write!(f, "b_{l}"),
            Slot::C => f.write_str("C"),
            Slot::D => f.write_str("D"),
            Slot::P(l) => write!(f, "P_{l}"),
            Slot::Factor(l) => write!(f, "L_{l}"),
            Slot::X0(i) => write!(f, "x0_{i}"),
        }
    }
}

/// Offsets of every trainable tensor. `E_L` is never trainable: the state
/// update `x⁺ = E_L h^L = φ(·)` does not depend on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Packing {
    pub slots: Vec<(Slot, std::ops::Range<usize>)>,
    pub len: usize,
}

impl Packing {
    pub fn new(model: &TrainModel) -> Self {
        let p = &model.params;
        let layers = model.layers();
        let mut slots = Vec::new();
        let mut at = 0;
        let mut add = |slot: Slot, n: usize| {
            slots.push((slot, at..at + n));
            at += n;
        };
        if model.kind.is_implicit() {
            for l in 0..layers {
                add(Slot::E(l), p.e[l].len());
            }
        }
        for l in 0..layers {
            add(Slot::W(l), p.w[l].len());
            add(Slot::B(l), p.b[l].len());
            add(Slot::Bias(l), p.bias[l].len());
        }
        add(Slot::C, p.c.len());
        add(Slot::D, p.d.len());
        for (l, v) in model.p.iter().enumerate() {
            add(Slot::P(l), v.len());
        }
        for (l, f) in model.factors.iter().enumerate() {
            add(Slot::Factor(l), f.nrows() * (f.nrows() + 1) / 2);
        }
        for (i, x) in model.x0.iter().enumerate() {
            add(Slot::X0(i), x.len());
        }
        Packing { slots, len: at }
    }

    pub fn range(&self, slot: Slot) -> Option<std::ops::Range<usize>> {
        self.slots.iter().find(|(s, _)| *s == slot).map(|(_, r)| r.clone())
    }

    fn for_each_slot<F: FnMut(Slot, std::ops::Range<usize>)>(&self, mut f: F) {
        for (s, r) in &self.slots {
            f(*s, r.clone());
        }
    }

    pub fn pack(&self, m: &TrainModel) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        self.for_each_slot(|slot, r| {
            let dst = &mut out[r];
            match slot {
                Slot::Factor(l) => lower_to_slice(&m.factors[l], dst),
                other => dst.copy_from_slice(slot_slice(m, other)),
            }
        });
        out
    }

    pub fn unpack_into(&self, theta: &[f64], m: &mut TrainModel) {
        self.for_each_slot(|slot, r| {
            let src = &theta[r];
            match slot {
                Slot::E(l) => m.params.e[l].copy_from_slice(src),
                Slot::W(l) => m.params.w[l].copy_from_slice(src),
                Slot::B(l) => m.params.b[l].copy_from_slice(src),
                Slot::Bias(l) => m.params.bias[l].copy_from_slice(src),
                Slot::C => m.params.c.copy_from_slice(src),
                Slot::D => m.params.d.copy_from_slice(src),
                Slot::P(l) => m.p[l].copy_from_slice(src),
                Slot::Factor(l) => slice_to_lower(src, &mut m.factors[l]),
                Slot::X0(i) => m.x0[i].copy_from_slice(src),
            }
        });
    }
}

fn slot_slice(m: &TrainModel, slot: Slot) -> &[f64] {
    match slot {
        Slot::E(l) => m.params.e[l].as_slice(),
        Slot::W(l) => m.params.w[l].as_slice(),
        Slot::B(l) => m.params.b[l].as_slice(),
        Slot::Bias(l) => m.params.bias[l].as_slice(),
        Slot::C => m.params.c.as_slice(),
        Slot::D => m.params.d.as_slice(),
        Slot::P(l) => m.p[l].as_slice(),
        Slot::X0(i) => m.x0[i].as_slice(),
        Slot::Factor(_) => unreachable!("factors are stored as lower triangles"),
    }
}

fn lower_to_slice(m: &DMatrix<f64>, dst: &mut [f64]) {
    let n = m.nrows();
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            dst[k] = m[(i, j)];
            k += 1;
        }
    }
}

fn slice_to_lower(src: &[f64], m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            m[(i, j)] = src[k];
            k += 1;
        }
    }
}

/// One sequence of a batch and the index of its trainable initial state.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub seq: &'a Sequence,
    pub x0: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub mse: f64,
    pub penalty: f64,
    pub c_inf: f64,
    /// Gradient in [`Packing`] order; empty when `diverged`.
    pub grad: Vec<f64>,
    pub diverged: bool,
}

type DynLu = LU<f64, nalgebra::Dyn, nalgebra::Dyn>;

/// LU factors of `Eₗ` and `Eₗᵀ` for `l < L`; `None` for identity layers.
struct Solves {
    lu: Vec<Option<(DynLu, DynLu)>>,
}

impl Solves {
    fn new(model: &TrainModel) -> Result<Self> {
        let mut lu = Vec::with_capacity(model.layers());
        for l in 0..model.layers() {
            let e = &model.params.e[l];
            if !model.kind.is_implicit() || e.is_identity(0.0) {
                lu.push(None);
                continue;
            }
            let f = e.clone().lu();
            if !f.is_invertible() {
                return Err(Error::SingularE { layer: l });
            }
            lu.push(Some((f, e.transpose().lu())));
        }
        Ok(Solves { lu })
    }

    fn solve(&self, l: usize, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.lu[l] {
            None => Ok(rhs.clone()),
            Some((f, _)) => f.solve(rhs).ok_or(Error::SingularE { layer: l }),
        }
    }

    fn solve_t(&self, l: usize, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.lu[l] {
            None => Ok(rhs.clone()),
            Some((_, t)) => t.solve(rhs).ok_or(Error::SingularE { layer: l }),
        }
    }
}

/// Per-step values kept for the backward pass.
struct Tape {
    states: Vec<DVector<f64>>,
    outputs: Vec<DVector<f64>>,
    /// `hidden[k][l] = hˡ` at step `k`.
    hidden: Vec<Vec<DVector<f64>>>,
    /// `pre[k][l] = Wₗ hˡ + Bₗ u + bₗ`.
    pre: Vec<Vec<DVector<f64>>>,
}

fn forward(model: &TrainModel, solves: &Solves, u: &[DVector<f64>], x0: &DVector<f64>) -> Result<Option<Tape>> {
    let p = &model.params;
    let layers = model.layers();
    let horizon = u.len();
    let mut tape = Tape {
        states: Vec::with_capacity(horizon),
        outputs: Vec::with_capacity(horizon),
        hidden: Vec::with_capacity(horizon),
        pre: Vec::with_capacity(horizon),
    };
    let mut x = x0.clone();
    for (k, uk) in u.iter().enumerate() {
        let y = &p.c * &x + &p.d * uk;
        if !all_finite(x.as_slice()) || !all_finite(y.as_slice()) {
            return Ok(None);
        }
        tape.states.push(x.clone());
        tape.outputs.push(y);
        if k + 1 == horizon {
            break;
        }
        let mut hidden = Vec::with_capacity(layers);
        let mut pres = Vec::with_capacity(layers);
        let mut a = x.clone();
        for l in 0..layers {
            let h = solves.solve(l, &a)?;
            let pre = &p.w[l] * &h + &p.b[l] * uk + &p.bias[l];
            a = model.activation.apply(&pre);
            hidden.push(h);
            pres.push(pre);
        }
        tape.hidden.push(hidden);
        tape.pre.push(pres);
        x = a;
    }
    Ok(Some(tape))
}

/// Mean squared output error from step `washout` on; `None` on divergence.
pub fn sequence_mse(model: &TrainModel, seq: &Sequence, x0: &DVector<f64>, washout: usize) -> Result<Option<f64>> {
    let solves = Solves::new(model)?;
    let Some(tape) = forward(model, &solves, &seq.inputs, x0)? else {
        return Ok(None);
    };
    let scored = seq.len().saturating_sub(washout);
    if scored == 0 {
        return Err(Error::Config(format!("washout {washout} leaves no scored steps")));
    }
    let n_y = seq.outputs[0].len();
    let sse: f64 = (washout..seq.len()).map(|k| (&tape.outputs[k] - &seq.outputs[k]).norm_squared()).sum();
    let mse = sse / (scored * n_y) as f64;
    Ok(mse.is_finite().then_some(mse))
}

/// Objective and exact gradient over a batch, averaged over its sequences.
pub fn objective_and_gradient(model: &TrainModel, batch: &[BatchItem], mu: f64, epsilon: f64) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let packing = Packing::new(model);
    let mut grad = model.zeros_like();
    let solves = Solves::new(model)?;
    let p = &model.params;
    let layers = model.layers();
    let weight = 1.0 / batch.len() as f64;
    let mut mse = 0.0;

    for item in batch {
        let seq = item.seq;
        let x0 = match item.x0 {
            Some(i) => model.x0[i].clone(),
            None => DVector::zeros(p.c.ncols()),
        };
        let Some(tape) = forward(model, &solves, &seq.inputs, &x0)? else {
            return Ok(diverged());
        };
        let horizon = seq.len();
        let n_y = seq.outputs[0].len();
        let scale = weight / (horizon * n_y) as f64;
        let mut gx = DVector::zeros(x0.len());
        for k in (0..horizon).rev() {
            let err = &tape.outputs[k] - &seq.outputs[k];
            mse += scale * err.norm_squared();
            let gy = err * (2.0 * scale);
            grad.params.c += &gy * tape.states[k].transpose();
            grad.params.d += &gy * seq.inputs[k].transpose();
            // gx holds ∂/∂x_{k+1}; push it through step k, then add the readout
            let mut g_next = std::mem::replace(&mut gx, p.c.transpose() * &gy);
            if k + 1 < horizon {
                let uk = &seq.inputs[k];
                for l in (0..layers).rev() {
                    let pre = &tape.pre[k][l];
                    let h = &tape.hidden[k][l];
                    let gpre = g_next.zip_map(pre, |g, z| g * model.activation.slope(z));
                    grad.params.w[l] += &gpre * h.transpose();
                    grad.params.b[l] += &gpre * uk.transpose();
                    grad.params.bias[l] += &gpre;
                    let gh = p.w[l].transpose() * &gpre;
                    let q = solves.solve_t(l, &gh)?;
                    if model.kind.is_implicit() {
                        grad.params.e[l] -= &q * h.transpose();
                    }
                    g_next = q;
                }
                gx += g_next;
            }
        }
        if let Some(i) = item.x0 {
            grad.x0[i] += gx;
        }
    }

    let residuals = model.residuals(epsilon);
    let mut penalty = 0.0;
    let mut c_inf: f64 = 0.0;
    for (l, r) in residuals.iter().enumerate() {
        penalty += mu * r.norm_squared();
        c_inf = c_inf.max(r.amax());
        let n_in = p.w[l].ncols();
        let s = block_sensitivity(&(r * (2.0 * mu)), n_in, &model.factors[l]);
        grad.factors[l] += s.factor;
        match model.kind {
            ModelKind::CiRnn => {
                grad.params.e[l] += s.e;
                grad.params.w[l] += s.w;
                grad.p[l] += s.p_in;
                if l + 1 == layers {
                    grad.p[0] += s.p_out * model.lambda;
                } else {
                    grad.p[l + 1] += s.p_out;
                }
            }
            ModelKind::SRnn => grad.params.w[l] += s.w,
            ModelKind::Rnn | ModelKind::Implicit => {}
        }
    }
    Ok(Evaluation { objective: mse + penalty, mse, penalty, c_inf, grad: packing.pack(&grad), diverged: false })
}

fn diverged() -> Evaluation {
    Evaluation {
        objective: f64::INFINITY,
        mse: f64::INFINITY,
        penalty: 0.0,
        c_inf: f64::NAN,
        grad: Vec::new(),
        diverged: true,
    }
}

/// One row of the per-epoch history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub c_infnorm: f64,
    /// Penalty weight used during the epoch.
    pub mu: f64,
    /// Step size used during the epoch, after any divergence halving.
    pub lr: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Best feasible model seen, judged by validation MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub model: TrainModel,
    pub val_mse: f64,
    pub train_mse: f64,
    pub c_inf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    AllDiverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `None` when no snapshot ever satisfied the violation tolerance.
    pub best: Option<Snapshot>,
    pub last: TrainModel,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    /// `(epoch, batch)` of every skipped non-finite step.
    pub divergence_events: Vec<(usize, usize)>,
}

impl TrainOutcome {
    pub fn best_or_err(&self) -> Result<&Snapshot> {
        self.best.as_ref().ok_or_else(|| {
            Error::Training(format!(
                "no snapshot met the constraint tolerance after {} epochs",
                self.history.len()
            ))
        })
    }
}

/// Mean MSE over sequences; infinite when any of them diverges.
fn split_mse(model: &TrainModel, seqs: &[(usize, &Sequence)], x0: &dyn Fn(usize) -> DVector<f64>, washout: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for (i, seq) in seqs {
        match sequence_mse(model, seq, &x0(*i), washout) {
            Ok(Some(v)) => total += v,
            Ok(None) | Err(Error::SingularE { .. }) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(total / seqs.len() as f64)
}

/// Runs the epoch loop on the train split and selects the best feasible
/// snapshot on the validation split.
pub fn train(cfg: &TrainConfig, data: &SeqDataset, init: TrainModel) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let train_seqs: Vec<&Sequence> = data.split(Split::Train);
    let val_seqs: Vec<(usize, &Sequence)> = data.split(Split::Val).into_iter().enumerate().collect();
    if train_seqs.is_empty() || val_seqs.is_empty() {
        return Err(Error::Data("training needs both training and validation sequences".into()));
    }
    let dims = init.params.dims();
    if dims.n_u != data.n_u() || dims.n_y != data.n_y() {
        return Err(Error::Dimension(format!(
            "model has n_u = {}, n_y = {} but data has {}, {}",
            dims.n_u,
            dims.n_y,
            data.n_u(),
            data.n_y()
        )));
    }
    let mut model = init;
    model.x0 = if cfg.train_x0 { vec![DVector::zeros(dims.n_x); train_seqs.len()] } else { Vec::new() };
    let packing = Packing::new(&model);
    let mut theta = packing.pack(&model);
    let mut adam = Adam::new(packing.len);
    let p_ranges: Vec<_> = (0..model.p.len()).filter_map(|l| packing.range(Slot::P(l))).collect();
    let factor_ranges: Vec<_> = (0..model.factors.len()).filter_map(|l| packing.range(Slot::Factor(l))).collect();
    let mask: Option<Vec<bool>> = cfg.refresh_factors.then(|| {
        let mut m = vec![true; packing.len];
        factor_ranges.iter().for_each(|r| m[r.clone()].iter_mut().for_each(|v| *v = false));
        m
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mu = cfg.mu0;
    let mut history = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut events = Vec::new();
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut stop = StopReason::MaxEpochs;
    let train_indexed: Vec<(usize, &Sequence)> = train_seqs.iter().copied().enumerate().collect();
    let zero_state = DVector::zeros(dims.n_x);

    for epoch in 0..cfg.max_epochs {
        let mut lr = cfg.lr_at(epoch);
        let mut stepped = 0;
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem { seq: train_seqs[i], x0: cfg.train_x0.then_some(i) })
                .collect();
            let eval = match objective_and_gradient(&model, &batch, mu, cfg.epsilon) {
                Ok(e) => e,
                Err(Error::SingularE { .. }) => diverged(),
                Err(e) => return Err(e),
            };
            if eval.diverged || !all_finite(&eval.grad) {
                events.push((epoch, b));
                lr *= 0.5;
                continue;
            }
            adam.step(&mut theta, &eval.grad, lr, mask.as_deref());
            for r in &p_ranges {
                theta[r.clone()].iter_mut().for_each(|v| *v = v.max(P_FLOOR));
            }
            packing.unpack_into(&theta, &mut model);
            if cfg.refresh_factors {
                model.refresh_factors(cfg.epsilon);
                theta = packing.pack(&model);
            }
            stepped += 1;
        }

        let x0_of = |i: usize| if cfg.train_x0 { model.x0[i].clone() } else { zero_state.clone() };
        let train_mse = split_mse(&model, &train_indexed, &x0_of, 0)?;
        let val_mse = split_mse(&model, &val_seqs, &|_| zero_state.clone(), cfg.washout)?;
        let c_inf = model.c_inf(cfg.epsilon);
        history.push(EpochRecord { epoch, train_mse, val_mse, c_infnorm: c_inf, mu, lr });

        if stepped == 0 && epoch == 0 && !train_mse.is_finite() {
            stop = StopReason::AllDiverged;
            break;
        }
        if c_inf > cfg.viol_tol {
            mu *= cfg.penalty_factor;
        }
        let improves = val_mse.is_finite() && best.as_ref().is_none_or(|b| val_mse < b.val_mse);
        if c_inf <= cfg.viol_tol && improves {
            best = Some(Snapshot { epoch, model: model.clone(), val_mse, train_mse, c_inf });
        }
        let last_improvement = best.as_ref().map_or(-1, |b| b.epoch as i64);
        if epoch as i64 - last_improvement > cfg.patience as i64 {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    if history.iter().all(|h| !h.train_mse.is_finite()) {
        stop = StopReason::AllDiverged;
    }
    Ok(TrainOutcome { best, last: model, history, stop, divergence_events: events })
}

/// Writes the per-epoch history as CSV to any writer.
pub fn write_history<W: Write>(out: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}
