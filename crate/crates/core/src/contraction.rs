//! Contraction certificates for implicit recurrent models.
//!
//! A certificate is a list of positive diagonal matrices `P₀..P_L` and a rate
//! `λ ∈ (0, 1]`, linked by `P_L = λ P₀`. For every layer the block
//!
//! ```text
//! ⎡ Eₗ + Eₗᵀ − Pₗ   Wₗᵀ  ⎤
//! ⎣ Wₗ             Pₗ₊₁ ⎦  ⪰ 0
//! ```
//!
//! must hold. The state then contracts at rate `λ` in the metric
//! `δxᵀ P₀⁻¹ δx`: `Vₖ₊₁ ≤ λ Vₖ` for any pair of trajectories sharing inputs.
//!
//! The linkage direction `P_L = λ P₀` is the one under which the per-layer
//! storage inequalities `Vˡ⁺¹ ≤ Vˡ` chain into `Vₖ₊₁ ≤ λ Vₖ`; at `λ = 1` it makes
//! no difference.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, mask_lower, sym_max_eig, sym_min_eig, symmetrize};
use crate::models::{simulate, Activation, ExplicitParams, ImplicitParams};

/// Default absolute eigenvalue tolerance for verification reports.
pub const DEFAULT_EIG_TOL: f64 = 1e-9;
/// Default strictness margin subtracted inside the factorization constraint.
pub const DEFAULT_MARGIN: f64 = 1e-4;
pub const CERTIFICATE_VERSION: u32 = 1;

/// Diagonal metrics `P₀..P_{L−1}` plus rate; `P_L` is implied by `P_L = λ P₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub p: Vec<DVector<f64>>,
    pub lambda: f64,
}

impl Certificate {
    pub fn new(p: Vec<DVector<f64>>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Config(format!("contraction rate must lie in (0, 1], got {lambda}")));
        }
        if p.is_empty() {
            return Err(Error::Dimension("certificate needs at least P_0".into()));
        }
        if let Some((l, _)) = p.iter().enumerate().find(|(_, v)| v.iter().any(|&x| !(x > 0.0))) {
            return Err(Error::Config(format!("P_{l} has a non-positive diagonal entry")));
        }
        Ok(Certificate { p, lambda })
    }

    /// All `Pₗ = I` for the given widths `n₀..n_L`.
    pub fn identity(widths: &[usize], lambda: f64) -> Self {
        let layers = widths.len() - 1;
        Certificate {
            p: widths[..layers].iter().map(|&n| DVector::from_element(n, 1.0)).collect(),
            lambda,
        }
    }

    pub fn layers(&self) -> usize {
        self.p.len()
    }

    /// `Pₗ` for `l = 0..=L`.
    pub fn p_at(&self, l: usize) -> DVector<f64> {
        if l == self.p.len() {
            &self.p[0] * self.lambda
        } else {
            self.p[l].clone()
        }
    }

    pub fn all(&self) -> Vec<DVector<f64>> {
        (0..=self.layers()).map(|l| self.p_at(l)).collect()
    }

    fn check_dims(&self, params: &ImplicitParams) -> Result<()> {
        let widths = params.dims().widths;
        if self.layers() != params.layers() {
            return Err(Error::Dimension(format!(
                "certificate has {} layers, model has {}",
                self.layers(),
                params.layers()
            )));
        }
        for (l, p) in self.p.iter().enumerate() {
            if p.len() != widths[l] {
                return Err(Error::Dimension(format!("P_{l} has length {}, expected {}", p.len(), widths[l])));
            }
        }
        Ok(())
    }

    pub fn to_file(&self, margin: f64) -> CertificateFile {
        CertificateFile {
            version: CERTIFICATE_VERSION,
            lambda: self.lambda,
            margin,
            p: self.all().iter().map(|v| v.as_slice().to_vec()).collect(),
        }
    }

    pub fn save(&self, path: &Path, margin: f64) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file(margin))?)?;
        Ok(())
    }

    /// Loads a certificate and the margin it was produced with.
    pub fn load(path: &Path) -> Result<(Self, f64)> {
        let file: CertificateFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        file.into_certificate()
    }
}

/// On-disk certificate: rate, margin and all of `P₀..P_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub version: u32,
    pub lambda: f64,
    pub margin: f64,
    pub p: Vec<Vec<f64>>,
}

impl CertificateFile {
    pub fn into_certificate(self) -> Result<(Certificate, f64)> {
        if self.version != CERTIFICATE_VERSION {
            return Err(Error::Format(format!("unsupported certificate version {}", self.version)));
        }
        if self.p.len() < 2 {
            return Err(Error::Format("certificate must list P_0..P_L with L >= 1".into()));
        }
        let layers = self.p.len() - 1;
        let (p0, pl) = (&self.p[0], &self.p[layers]);
        let linked = p0.len() == pl.len()
            && p0
                .iter()
                .zip(pl)
                .all(|(a, b)| (self.lambda * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        if !linked {
            return Err(Error::Format("P_L does not equal lambda * P_0".into()));
        }
        let p = self.p[..layers].iter().map(|v| DVector::from_vec(v.clone())).collect();
        Ok((Certificate::new(p, self.lambda)?, self.margin))
    }
}

/// One assembled LMI block (exactly symmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    pub m: DMatrix<f64>,
    pub layer: usize,
}

impl LmiBlock {
    pub fn min_eig(&self) -> f64 {
        sym_min_eig(&self.m)
    }
}

/// Lower-triangular factors realizing each block as `M − εI = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BmFactors {
    pub l: Vec<DMatrix<f64>>,
}

impl BmFactors {
    /// `Lₗ = chol(Mₗ − εI)`; fails when a block is not strictly above the margin.
    pub fn from_blocks(blocks: &[LmiBlock], margin: f64) -> Result<Self> {
        let l = blocks
            .iter()
            .map(|b| {
                let n = b.m.nrows();
                cholesky_lower(&(&b.m - DMatrix::identity(n, n) * margin)).ok_or_else(|| {
                    Error::Config(format!("block {} is not positive definite beyond the margin", b.layer))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BmFactors { l })
    }
}

/// Minimum eigenvalues of every checked matrix and the resulting verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub lambda: f64,
    pub margin: f64,
    pub tolerance: f64,
    /// Per-layer minimum eigenvalue of the assembled block.
    pub block_min_eigs: Vec<f64>,
    /// Per-layer minimum eigenvalue of `Eₗ + Eₗᵀ − Pₗ`.
    pub storage_min_eigs: Vec<f64>,
    pub feasible: bool,
}

impl CertReport {
    fn decide(lambda: f64, margin: f64, tolerance: f64, block_min_eigs: Vec<f64>, storage_min_eigs: Vec<f64>) -> Self {
        let feasible = block_min_eigs.iter().all(|&e| e >= margin - tolerance)
            && storage_min_eigs.iter().all(|&e| e >= -tolerance);
        CertReport { lambda, margin, tolerance, block_min_eigs, storage_min_eigs, feasible }
    }

    pub fn min_eig(&self) -> f64 {
        self.block_min_eigs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn block_matrix(top_left: &DMatrix<f64>, lower_left: &DMatrix<f64>, bottom_right: &DVector<f64>) -> DMatrix<f64> {
    let n0 = top_left.nrows();
    let n1 = lower_left.nrows();
    let mut m = DMatrix::zeros(n0 + n1, n0 + n1);
    m.view_mut((0, 0), (n0, n0)).copy_from(top_left);
    m.view_mut((n0, 0), (n1, n0)).copy_from(lower_left);
    m.view_mut((0, n0), (n0, n1)).copy_from(&lower_left.transpose());
    for i in 0..n1 {
        m[(n0 + i, n0 + i)] = bottom_right[i];
    }
    symmetrize(&m)
}

/// The contraction block of layer `l` with `P_L = λ P₀` substituted.
pub fn assemble_lmi(params: &ImplicitParams, cert: &Certificate, l: usize) -> Result<LmiBlock> {
    params.validate()?;
    cert.check_dims(params)?;
    if l >= params.layers() {
        return Err(Error::Dimension(format!("layer {l} out of range 0..{}", params.layers())));
    }
    let e = &params.e[l];
    let top = e + e.transpose() - DMatrix::from_diagonal(&cert.p[l]);
    Ok(LmiBlock { m: block_matrix(&top, &params.w[l], &cert.p_at(l + 1)), layer: l })
}

/// `[[I, Aᵀ], [A, I]]`, the unit spectral-norm block for an explicit layer.
pub fn assemble_spectral(a: &DMatrix<f64>, l: usize) -> LmiBlock {
    let n0 = a.ncols();
    LmiBlock {
        m: block_matrix(&DMatrix::identity(n0, n0), a, &DVector::from_element(a.nrows(), 1.0)),
        layer: l,
    }
}

pub fn assemble_all(params: &ImplicitParams, cert: &Certificate) -> Result<Vec<LmiBlock>> {
    (0..params.layers()).map(|l| assemble_lmi(params, cert, l)).collect()
}

pub fn verify_certificate(params: &ImplicitParams, cert: &Certificate, tol: f64) -> Result<CertReport> {
    verify_certificate_at(params, cert, 0.0, tol)
}

/// Like [`verify_certificate`] but demands every block be `⪰ margin·I`.
pub fn verify_certificate_at(params: &ImplicitParams, cert: &Certificate, margin: f64, tol: f64) -> Result<CertReport> {
    let blocks = assemble_all(params, cert)?;
    let block_min_eigs = blocks.iter().map(LmiBlock::min_eig).collect();
    let storage_min_eigs = (0..params.layers())
        .map(|l| {
            let e = &params.e[l];
            sym_min_eig(&(e + e.transpose() - DMatrix::from_diagonal(&cert.p[l])))
        })
        .collect();
    Ok(CertReport::decide(cert.lambda, margin, tol, block_min_eigs, storage_min_eigs))
}

/// Checks `Aᵀ M A − λ M ⪯ 0` for a diagonal metric `M`.
///
/// The single entry of `block_min_eigs` is the minimum eigenvalue of
/// `λM − AᵀMA`, i.e. minus the maximum eigenvalue of the contraction LMI.
pub fn verify_explicit_metric(a: &DMatrix<f64>, metric: &DVector<f64>, lambda: f64, tol: f64) -> Result<CertReport> {
    let n = a.nrows();
    if a.ncols() != n || metric.len() != n {
        return Err(Error::Dimension("A must be square and match the metric".into()));
    }
    if metric.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Config("metric must be diagonal positive".into()));
    }
    let m = DMatrix::from_diagonal(metric);
    let lmi = a.transpose() * &m * a - &m * lambda;
    let max_eig = sym_max_eig(&lmi);
    Ok(CertReport::decide(lambda, 0.0, tol, vec![-max_eig], Vec::new()))
}

/// Implicit form of an explicit model with `Eₗ = Pₗ` and `Wₗ = Aₗ Pₗ`.
///
/// The dynamics are unchanged, and for a diagonal metric this choice of `E`
/// is the one under which the certificate is easiest to satisfy.
pub fn lift_explicit(params: &ExplicitParams, cert: &Certificate) -> Result<ImplicitParams> {
    let mut lifted = params.to_implicit();
    cert.check_dims(&lifted)?;
    for l in 0..lifted.layers() {
        let p = DMatrix::from_diagonal(&cert.p[l]);
        lifted.w[l] = &params.a[l] * &p;
        lifted.e[l] = p;
    }
    Ok(lifted)
}

/// Result of the diagonal metric search.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricSearch {
    /// `metric` is normalized to `trace = n` and verified at the tolerance.
    Feasible { metric: DVector<f64>, margin: f64, report: CertReport },
    /// No diagonal metric exists; `best_margin` is the optimal (negative)
    /// value of `max s : λM − AᵀMA ⪰ sI`.
    Infeasible { best_margin: f64 },
}

impl MetricSearch {
    pub fn is_feasible(&self) -> bool {
        matches!(self, MetricSearch::Feasible { .. })
    }
}

/// Searches a diagonal contraction metric for `x⁺ = φ(Ax)`.
///
/// Solves `max s` subject to `Σ mᵢ (λ eᵢeᵢᵀ − aᵢaᵢᵀ) ⪰ sI`, `mᵢ ≥ s`,
/// `Σ mᵢ = n` with a log-barrier Newton method (`aᵢ` is row `i` of `A`).
/// A positive optimum certifies strict feasibility.
pub fn find_certificate_explicit(a: &DMatrix<f64>, lambda: f64) -> Result<MetricSearch> {
    find_certificate_explicit_with(a, lambda, DEFAULT_EIG_TOL, 400)
}

pub fn find_certificate_explicit_with(a: &DMatrix<f64>, lambda: f64, tol: f64, max_newton: usize) -> Result<MetricSearch> {
    let n = a.nrows();
    if a.ncols() != n || n == 0 {
        return Err(Error::Dimension("A must be square and nonempty".into()));
    }
    let mut m = DVector::from_element(n, 1.0);
    let s_start = sym_min_eig(&lmi_slack(a, lambda, &m, 0.0)).min(1.0);
    let mut s = s_start - 1.0;
    let mut t = 1.0;
    let dual_count = 2.0 * n as f64;
    let mut newton_steps = 0;

    loop {
        // centering
        loop {
            if newton_steps >= max_newton {
                return finish_search(a, lambda, tol, &m, s, Some(newton_steps));
            }
            newton_steps += 1;
            let Some((grad, hess)) = barrier_derivatives(a, lambda, &m, s, t) else {
                break;
            };
            let dim = n + 1;
            let mut kkt = DMatrix::zeros(dim + 1, dim + 1);
            kkt.view_mut((0, 0), (dim, dim)).copy_from(&hess);
            for i in 0..n {
                kkt[(i, dim)] = 1.0;
                kkt[(dim, i)] = 1.0;
            }
            let mut rhs = DVector::zeros(dim + 1);
            rhs.rows_mut(0, dim).copy_from(&(-&grad));
            let Some(sol) = kkt.lu().solve(&rhs) else {
                break;
            };
            let step = sol.rows(0, dim).into_owned();
            let decrement = -grad.dot(&step);
            if decrement / 2.0 < 1e-11 {
                break;
            }
            let f0 = barrier_value(a, lambda, &m, s, t).unwrap_or(f64::INFINITY);
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-14 {
                let m_try = &m + step.rows(0, n) * alpha;
                let s_try = s + step[n] * alpha;
                if let Some(f) = barrier_value(a, lambda, &m_try, s_try, t) {
                    if f <= f0 - 0.25 * alpha * decrement {
                        m = m_try;
                        s = s_try;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if dual_count / t < 1e-10 {
            break;
        }
        t *= 20.0;
    }
    finish_search(a, lambda, tol, &m, s, None)
}

fn finish_search(
    a: &DMatrix<f64>,
    lambda: f64,
    tol: f64,
    m: &DVector<f64>,
    s: f64,
    exhausted: Option<usize>,
) -> Result<MetricSearch> {
    let n = m.len() as f64;
    let metric = m * (n / m.sum());
    if metric.iter().all(|&v| v > 0.0) {
        let report = verify_explicit_metric(a, &metric, lambda, tol)?;
        if report.feasible {
            return Ok(MetricSearch::Feasible { metric, margin: s, report });
        }
    }
    match exhausted {
        Some(iterations) if s > -1e-6 => Err(Error::NonConvergence {
            iterations,
            detail: format!("metric search stalled near the boundary (margin {s:.3e})"),
        }),
        _ => Ok(MetricSearch::Infeasible { best_margin: s }),
    }
}

fn lmi_slack(a: &DMatrix<f64>, lambda: f64, m: &DVector<f64>, s: f64) -> DMatrix<f64> {
    let n = m.len();
    let md = DMatrix::from_diagonal(m);
    symmetrize(&(&md * lambda - a.transpose() * &md * a - DMatrix::identity(n, n) * s))
}

fn barrier_value(a: &DMatrix<f64>, lambda: f64, m: &DVector<f64>, s: f64, t: f64) -> Option<f64> {
    if m.iter().any(|&mi| mi - s <= 0.0) {
        return None;
    }
    let chol = lmi_slack(a, lambda, m, s).cholesky()?;
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let lin: f64 = m.iter().map(|&mi| (mi - s).ln()).sum();
    Some(-t * s - logdet - lin)
}

fn barrier_derivatives(
    a: &DMatrix<f64>,
    lambda: f64,
    m: &DVector<f64>,
    s: f64,
    t: f64,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = m.len();
    let x = lmi_slack(a, lambda, m, s).cholesky()?.inverse();
    let q = &x * a.transpose(); // column j: X aⱼ
    let r = a * &q; // aᵢᵀ X aⱼ
    let x2 = &x * &x;
    let aq = a * &x2 * a.transpose(); // aᵢᵀ X² aⱼ
    let mut grad = DVector::zeros(n + 1);
    let mut hess = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        let slack = m[i] - s;
        grad[i] = -(lambda * x[(i, i)] - r[(i, i)]) - 1.0 / slack;
        for j in 0..n {
            hess[(i, j)] =
                lambda * lambda * x[(i, j)].powi(2) - lambda * q[(i, j)].powi(2) - lambda * q[(j, i)].powi(2) + r[(i, j)].powi(2);
        }
        hess[(i, i)] += 1.0 / (slack * slack);
        let cross = -(lambda * x2[(i, i)] - aq[(i, i)]) - 1.0 / (slack * slack);
        hess[(i, n)] = cross;
        hess[(n, i)] = cross;
    }
    grad[n] = -t + x.trace() + m.iter().map(|&mi| 1.0 / (mi - s)).sum::<f64>();
    hess[(n, n)] = x.iter().map(|v| v * v).sum::<f64>() + m.iter().map(|&mi| (mi - s).powi(-2)).sum::<f64>();
    Some((grad, hess))
}

/// `vec(M − εI − L Lᵀ)`, column-major.
pub fn bm_residual(block: &LmiBlock, factor: &DMatrix<f64>, margin: f64) -> Result<DVector<f64>> {
    Ok(DVector::from_column_slice(bm_residual_matrix(block, factor, margin)?.as_slice()))
}

pub fn bm_residual_matrix(block: &LmiBlock, factor: &DMatrix<f64>, margin: f64) -> Result<DMatrix<f64>> {
    let n = block.m.nrows();
    if factor.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "factor is {}x{}, block is {n}x{n}",
            factor.nrows(),
            factor.ncols()
        )));
    }
    Ok(&block.m - DMatrix::identity(n, n) * margin - factor * factor.transpose())
}

/// Chain-rule weights of one block residual `R = M − εI − L Lᵀ`.
///
/// Given `G = ∂J/∂R` (symmetric), these are the gradients with respect to the
/// quantities the block is assembled from.
#[derive(Debug, Clone)]
pub struct BlockSensitivity {
    /// ∂J/∂Eₗ through the `Eₗ + Eₗᵀ` corner.
    pub e: DMatrix<f64>,
    /// ∂J/∂Wₗ (or ∂J/∂Aₗ for the spectral block).
    pub w: DMatrix<f64>,
    /// ∂J/∂Pₗ (diagonal), entering with a minus sign.
    pub p_in: DVector<f64>,
    /// ∂J/∂Pₗ₊₁ (diagonal).
    pub p_out: DVector<f64>,
    /// ∂J/∂Lₗ restricted to the lower triangle.
    pub factor: DMatrix<f64>,
}

pub fn block_sensitivity(g: &DMatrix<f64>, n_in: usize, factor: &DMatrix<f64>) -> BlockSensitivity {
    let n = g.nrows();
    let n_out = n - n_in;
    let g11 = g.view((0, 0), (n_in, n_in));
    let g21 = g.view((n_in, 0), (n_out, n_in));
    let g12 = g.view((0, n_in), (n_in, n_out));
    let mut dl = -(g + g.transpose()) * factor;
    mask_lower(&mut dl);
    BlockSensitivity {
        e: g11 + g11.transpose(),
        w: g21 + g12.transpose(),
        p_in: -g11.diagonal(),
        p_out: g.view((n_in, n_in), (n_out, n_out)).diagonal(),
        factor: dl,
    }
}

/// Per-step ratios `Vₖ₊₁ / Vₖ` of `Vₖ = dₖᵀ P₀⁻¹ dₖ`, `dₖ = xₖᵃ − xₖᵇ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionTrace {
    pub lambda: f64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub diverged: bool,
}

impl ContractionTrace {
    /// Every ratio at most `λ (1 + rel_tol)`.
    pub fn passes(&self, rel_tol: f64) -> bool {
        !self.diverged && self.max_ratio <= self.lambda * (1.0 + rel_tol)
    }
}

/// Relative size below which a state difference is treated as round-off.
const DIFF_FLOOR: f64 = 1e-7;

pub fn empirical_contraction_test(
    params: &ImplicitParams,
    act: Activation,
    cert: &Certificate,
    u_seq: &[DVector<f64>],
    x0_a: &DVector<f64>,
    x0_b: &DVector<f64>,
) -> Result<ContractionTrace> {
    cert.check_dims(params)?;
    let factored = params.factorize()?;
    let ta = simulate(&factored, act, u_seq, x0_a)?;
    let tb = simulate(&factored, act, u_seq, x0_b)?;
    let p0_inv = cert.p[0].map(|v| 1.0 / v);
    let steps = ta.states.len().min(tb.states.len());
    let measure = |k: usize| -> Option<f64> {
        let (xa, xb) = (&ta.states[k], &tb.states[k]);
        let d = xa - xb;
        let scale = xa.norm().max(xb.norm()).max(1.0);
        (d.norm() > DIFF_FLOOR * scale).then(|| d.component_mul(&d).dot(&p0_inv))
    };
    let mut ratios = Vec::new();
    for k in 0..steps.saturating_sub(1) {
        if let (Some(v0), Some(v1)) = (measure(k), measure(k + 1)) {
            ratios.push(v1 / v0);
        }
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(ContractionTrace { lambda: cert.lambda, ratios, max_ratio, diverged: ta.diverged || tb.diverged })
}
