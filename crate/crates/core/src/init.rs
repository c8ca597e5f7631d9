//! Weight sampling, projection onto the contracting implicit set, spectral
//! clipping and the named experiment presets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::contraction::{block_matrix, block_sensitivity, verify_certificate_at, CertReport, Certificate, DEFAULT_MARGIN};
use crate::error::{Error, Result};
use crate::linalg::{psd_lower_factor, spectral_norm};
use crate::models::{ExplicitParams, ImplicitParams, LayerDims, ModelKind, ModelParams};
use crate::optim::{lbfgs, LbfgsOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Target spectral radius of the sampled recurrent weights.
    pub alpha: f64,
    pub seed: u64,
    pub dims: LayerDims,
    /// Feasibility margin of the LMI blocks.
    pub epsilon: f64,
    /// Contraction rate.
    pub lambda: f64,
}

impl InitConfig {
    pub fn new(dims: LayerDims, alpha: f64, seed: u64) -> Self {
        InitConfig { alpha, seed, dims, epsilon: DEFAULT_MARGIN, lambda: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, variance: f64) -> DMatrix<f64> {
    if variance == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// `Aₗ ~ 𝒩(0, α²/n)` with `n` the column count; `Bₗ ~ 𝒩(0, 1/n_u)`,
/// `C ~ 𝒩(0, 1/n_x)`, `bₗ = 0`, `D = 0`.
pub fn sample_explicit(cfg: &InitConfig) -> Result<ExplicitParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = &cfg.dims;
    let mut p = ExplicitParams::zeros(dims);
    for l in 0..dims.layers() {
        let (rows, cols) = (dims.widths[l + 1], dims.widths[l]);
        p.a[l] = gaussian(&mut rng, rows, cols, cfg.alpha * cfg.alpha / cols as f64);
    }
    for l in 0..dims.layers() {
        p.b[l] = gaussian(&mut rng, dims.widths[l + 1], dims.n_u, 1.0 / dims.n_u.max(1) as f64);
    }
    p.c = gaussian(&mut rng, dims.n_y, dims.n_x, 1.0 / dims.n_x as f64);
    Ok(p)
}

/// Implicit weights with `Eₗ = I` and `Wₗ ~ 𝒰[−1/√n, 1/√n]`; input and output
/// maps as in [`sample_explicit`].
pub fn sample_uniform_implicit(cfg: &InitConfig) -> Result<ImplicitParams> {
    let mut p = sample_explicit(&InitConfig { alpha: 0.0, ..cfg.clone() })?.to_implicit();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_u64);
    for w in &mut p.w {
        let bound = 1.0 / (w.ncols() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        w.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    }
    Ok(p)
}

/// Projection onto `{‖A‖₂ ≤ 1}`.
pub fn clip_spectral(a: &DMatrix<f64>) -> DMatrix<f64> {
    clip_spectral_to(a, 1.0)
}

/// Clamps every singular value at `bound`.
pub fn clip_spectral_to(a: &DMatrix<f64>, bound: f64) -> DMatrix<f64> {
    if a.is_empty() || spectral_norm(a) <= bound {
        return a.clone();
    }
    // A V diag(min(1, b/σ)) Vᵀ with AᵀA = V diag(σ²) Vᵀ
    let eig = SymmetricEigen::new(a.transpose() * a);
    let factors = eig.eigenvalues.map(|s2| {
        let s = s2.max(0.0).sqrt();
        if s > bound {
            bound / s
        } else {
            1.0
        }
    });
    a * &eig.eigenvectors * DMatrix::from_diagonal(&factors) * eig.eigenvectors.transpose()
}

/// Controls of the projection solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectOptions {
    /// `None` starts from the deterministic interior point; `Some(seed)`
    /// perturbs it.
    pub restart: Option<u64>,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Target `max |R|` of the factorization residual.
    pub feas_tol: f64,
    /// Relative change of the fit objective between outer rounds.
    pub obj_tol: f64,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        ProjectOptions { restart: None, max_outer: 60, max_inner: 4000, feas_tol: 1e-5, obj_tol: 1e-5 }
    }
}

/// Result of [`project_ci`].
///
/// The solver works with blocks `⪰ I`; the problem is homogeneous in
/// `(E, W, P)`, so scaling the returned point by `ε` gives a point feasible
/// at margin `ε` with objective `ε² · normalized_objective`, which is what
/// `objective` reports. The returned parameters themselves are the unit-margin
/// point, which is also feasible at any margin `ε ≤ 1`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub params: ImplicitParams,
    pub cert: Certificate,
    pub report: CertReport,
    pub objective: f64,
    pub normalized_objective: f64,
    pub max_residual: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
}

/// Offsets of each layer's `(E, W, P, L)` inside the flat solver vector.
struct Layout {
    widths: Vec<usize>,
    lambda: f64,
    e: Vec<usize>,
    w: Vec<usize>,
    p: Vec<usize>,
    l: Vec<usize>,
    len: usize,
}

struct Unpacked {
    e: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
    p: Vec<DVector<f64>>,
    l: Vec<DMatrix<f64>>,
}

impl Layout {
    fn new(widths: &[usize], lambda: f64) -> Self {
        let layers = widths.len() - 1;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let e = (0..layers).map(|l| take(widths[l] * widths[l])).collect();
        let w = (0..layers).map(|l| take(widths[l + 1] * widths[l])).collect();
        let p = (0..layers).map(|l| take(widths[l])).collect();
        let l = (0..layers)
            .map(|l| {
                let n = widths[l] + widths[l + 1];
                take(n * (n + 1) / 2)
            })
            .collect();
        Layout { widths: widths.to_vec(), lambda, e, w, p, l, len: at }
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn block_size(&self, l: usize) -> usize {
        self.widths[l] + self.widths[l + 1]
    }

    fn unpack(&self, x: &[f64]) -> Unpacked {
        let mut out = Unpacked { e: Vec::new(), w: Vec::new(), p: Vec::new(), l: Vec::new() };
        for l in 0..self.layers() {
            let (n0, n1, n) = (self.widths[l], self.widths[l + 1], self.block_size(l));
            out.e.push(DMatrix::from_column_slice(n0, n0, &x[self.e[l]..self.e[l] + n0 * n0]));
            out.w.push(DMatrix::from_column_slice(n1, n0, &x[self.w[l]..self.w[l] + n1 * n0]));
            out.p.push(DVector::from_column_slice(&x[self.p[l]..self.p[l] + n0]));
            let mut f = DMatrix::zeros(n, n);
            let mut k = self.l[l];
            for j in 0..n {
                for i in j..n {
                    f[(i, j)] = x[k];
                    k += 1;
                }
            }
            out.l.push(f);
        }
        out
    }

    fn pack(&self, u: &Unpacked) -> Vec<f64> {
        let mut x = vec![0.0; self.len];
        for l in 0..self.layers() {
            x[self.e[l]..self.e[l] + u.e[l].len()].copy_from_slice(u.e[l].as_slice());
            x[self.w[l]..self.w[l] + u.w[l].len()].copy_from_slice(u.w[l].as_slice());
            x[self.p[l]..self.p[l] + u.p[l].len()].copy_from_slice(u.p[l].as_slice());
            let n = self.block_size(l);
            let mut k = self.l[l];
            for j in 0..n {
                for i in j..n {
                    x[k] = u.l[l][(i, j)];
                    k += 1;
                }
            }
        }
        x
    }

    fn p_out(&self, u: &Unpacked, l: usize) -> DVector<f64> {
        if l + 1 == self.layers() {
            &u.p[0] * self.lambda
        } else {
            u.p[l + 1].clone()
        }
    }

    fn blocks(&self, u: &Unpacked) -> Vec<DMatrix<f64>> {
        (0..self.layers())
            .map(|l| {
                let top = &u.e[l] + u.e[l].transpose() - DMatrix::from_diagonal(&u.p[l]);
                block_matrix(&top, &u.w[l], &self.p_out(u, l))
            })
            .collect()
    }
}

fn fit_objective(a: &[DMatrix<f64>], e: &[DMatrix<f64>], w: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(e).zip(w).map(|((a, e), w)| (a * e - w).norm_squared()).sum()
}

/// Augmented Lagrangian `Σ‖AE − W‖² + Σ ⟨Y, R⟩ + ρ/2 Σ ‖R‖²` with
/// `R = M − κI − L Lᵀ`; returns value and gradient.
fn augmented_lagrangian(
    layout: &Layout,
    a: &[DMatrix<f64>],
    y: &[DMatrix<f64>],
    rho: f64,
    kappa: f64,
    x: &[f64],
) -> (f64, Vec<f64>) {
    let u = layout.unpack(x);
    let blocks = layout.blocks(&u);
    let mut grad = Unpacked {
        e: u.e.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
        w: u.w.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
        p: u.p.iter().map(|v| DVector::zeros(v.len())).collect(),
        l: u.l.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
    };
    let mut f = 0.0;
    let layers = layout.layers();
    for l in 0..layers {
        let diff = &a[l] * &u.e[l] - &u.w[l];
        f += diff.norm_squared();
        grad.e[l] += a[l].transpose() * &diff * 2.0;
        grad.w[l] -= &diff * 2.0;

        let n = layout.block_size(l);
        let r = &blocks[l] - DMatrix::identity(n, n) * kappa - &u.l[l] * u.l[l].transpose();
        f += y[l].dot(&r) + 0.5 * rho * r.norm_squared();
        let g = &y[l] + &r * rho;
        let s = block_sensitivity(&g, layout.widths[l], &u.l[l]);
        grad.e[l] += s.e;
        grad.w[l] += s.w;
        grad.p[l] += s.p_in;
        if l + 1 == layers {
            grad.p[0] += s.p_out * layout.lambda;
        } else {
            grad.p[l + 1] += s.p_out;
        }
        grad.l[l] += s.factor;
    }
    (f, layout.pack(&grad))
}

fn residuals(layout: &Layout, x: &[f64], kappa: f64) -> Vec<DMatrix<f64>> {
    let u = layout.unpack(x);
    layout
        .blocks(&u)
        .iter()
        .zip(&u.l)
        .map(|(m, f)| m - DMatrix::identity(m.nrows(), m.nrows()) * kappa - f * f.transpose())
        .collect()
}

/// Strictly feasible start: `E = γI`, `Pₗ = γI`, `W = γ(λ/2) A/‖A‖₂`, which
/// keeps every block above `κ` for `γ = 4κ/λ`.
fn interior_start(layout: &Layout, a: &[DMatrix<f64>], kappa: f64, restart: Option<u64>) -> Unpacked {
    let gamma = 4.0 * kappa / layout.lambda;
    let mut u = Unpacked { e: Vec::new(), w: Vec::new(), p: Vec::new(), l: Vec::new() };
    for (&n0, a_l) in layout.widths.iter().zip(a).take(layout.layers()) {
        u.e.push(DMatrix::identity(n0, n0) * gamma);
        let norm = spectral_norm(a_l);
        let scale = if norm > 0.0 { gamma * layout.lambda * 0.5 / norm } else { 0.0 };
        u.w.push(a_l * scale);
        u.p.push(DVector::from_element(n0, gamma));
    }
    if let Some(seed) = restart {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = 0.05 * gamma;
        for m in u.e.iter_mut().chain(u.w.iter_mut()) {
            m.iter_mut().for_each(|v| *v += jitter * (rng.random::<f64>() - 0.5));
        }
        for p in &mut u.p {
            p.iter_mut().for_each(|v| *v *= 1.0 + 0.1 * (rng.random::<f64>() - 0.5));
        }
    }
    for m in layout.blocks(&u) {
        let n = m.nrows();
        u.l.push(psd_lower_factor(&(m - DMatrix::identity(n, n) * kappa), 0.0));
    }
    u
}

/// Projects explicit weights onto the contracting implicit set:
/// `min Σ ‖Aₗ Eₗ − Wₗ‖²_F` over `(E, W, P)` subject to every block `⪰ εI`.
/// `B`, `b`, `C`, `D` are carried over and `E_L = I`.
pub fn project_ci(explicit: &ExplicitParams, cfg: &InitConfig) -> Result<Projection> {
    project_ci_with(explicit, cfg, &ProjectOptions::default())
}

pub fn project_ci_with(explicit: &ExplicitParams, cfg: &InitConfig, opts: &ProjectOptions) -> Result<Projection> {
    cfg.validate()?;
    explicit.validate()?;
    if explicit.dims() != cfg.dims {
        return Err(Error::Dimension("weights do not match the configured dimensions".into()));
    }
    let kappa = 1.0;
    let layout = Layout::new(&cfg.dims.widths, cfg.lambda);
    let a = &explicit.a;
    let mut x = layout.pack(&interior_start(&layout, a, kappa, opts.restart));
    let mut y: Vec<DMatrix<f64>> = (0..layout.layers())
        .map(|l| DMatrix::zeros(layout.block_size(l), layout.block_size(l)))
        .collect();
    let mut rho: f64 = 10.0;
    let mut prev_res = f64::INFINITY;
    let mut prev_obj = f64::INFINITY;
    let mut inner_total = 0;
    let mut outer = 0;
    let mut max_res = f64::INFINITY;
    while outer < opts.max_outer {
        outer += 1;
        // loose inner solves while the multipliers are still far off
        let gtol = if prev_res.is_finite() { (1e-2 * prev_res * rho).clamp(1e-9, 1e-1) } else { 1e-3 };
        let inner = lbfgs(
            |v| augmented_lagrangian(&layout, a, &y, rho, kappa, v),
            x,
            LbfgsOptions { max_iter: opts.max_inner, gtol, ftol: 1e-16, ..Default::default() },
        );
        inner_total += inner.iterations;
        x = inner.x;
        let res = residuals(&layout, &x, kappa);
        max_res = res.iter().map(|r| r.amax()).fold(0.0, f64::max);
        let u = layout.unpack(&x);
        let obj = fit_objective(a, &u.e, &u.w);
        let settled = (obj - prev_obj).abs() <= opts.obj_tol * obj.max(1e-3);
        if max_res <= opts.feas_tol && settled {
            break;
        }
        prev_obj = obj;
        for (yl, rl) in y.iter_mut().zip(&res) {
            *yl += rl * rho;
        }
        if max_res > 0.25 * prev_res {
            rho = (rho * 10.0).min(1e8);
        }
        prev_res = max_res;
    }

    let u = layout.unpack(&x);
    let normalized_objective = fit_objective(a, &u.e, &u.w);
    let mut e = u.e.clone();
    e.push(DMatrix::identity(cfg.dims.n_x, cfg.dims.n_x));
    let params = ImplicitParams {
        e,
        w: u.w.clone(),
        b: explicit.b.clone(),
        bias: explicit.bias.clone(),
        c: explicit.c.clone(),
        d: explicit.d.clone(),
    };
    let cert = Certificate::new(u.p.clone(), cfg.lambda).map_err(|_| Error::NonConvergence {
        iterations: inner_total,
        detail: format!("metric left the positive orthant (residual {max_res:.3e})"),
    })?;
    let report = verify_certificate_at(&params, &cert, cfg.epsilon, 1e-6)?;
    if !report.feasible {
        return Err(Error::NonConvergence {
            iterations: inner_total,
            detail: format!("no feasible iterate (residual {max_res:.3e}, min eig {:.3e})", report.min_eig()),
        });
    }
    Ok(Projection {
        params,
        cert,
        report,
        objective: cfg.epsilon * cfg.epsilon * normalized_objective,
        normalized_objective,
        max_residual: max_res,
        outer_iterations: outer,
        inner_iterations: inner_total,
    })
}

/// How the weights of a fresh model are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Gaussian sample, left as is.
    Sampled,
    /// Gaussian sample with singular values clipped.
    Clipped,
    /// Gaussian sample projected onto the contracting implicit set.
    Projected,
    /// `E = I`, uniform `W`.
    Uniform,
}

impl InitScheme {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Rnn => InitScheme::Sampled,
            ModelKind::SRnn => InitScheme::Clipped,
            ModelKind::CiRnn | ModelKind::Implicit => InitScheme::Projected,
        }
    }
}

/// A freshly initialized model and, for projected models, its certificate.
#[derive(Debug, Clone)]
pub struct InitBundle {
    pub kind: ModelKind,
    pub params: ModelParams,
    pub cert: Option<Certificate>,
    pub projection_objective: Option<f64>,
}

pub fn init_model(kind: ModelKind, scheme: InitScheme, cfg: &InitConfig) -> Result<InitBundle> {
    let implicit_kind = kind.is_implicit();
    match (scheme, implicit_kind) {
        (InitScheme::Projected, _) => {
            let proj = project_ci(&sample_explicit(cfg)?, cfg)?;
            let params = if implicit_kind {
                ModelParams::Implicit(proj.params)
            } else {
                ModelParams::Explicit(proj.params.to_explicit()?)
            };
            Ok(InitBundle { kind, params, cert: Some(proj.cert), projection_objective: Some(proj.objective) })
        }
        (InitScheme::Uniform, _) => {
            let p = sample_uniform_implicit(cfg)?;
            let params = if implicit_kind { ModelParams::Implicit(p) } else { ModelParams::Explicit(p.to_explicit()?) };
            Ok(InitBundle { kind, params, cert: None, projection_objective: None })
        }
        (InitScheme::Sampled | InitScheme::Clipped, _) => {
            let mut p = sample_explicit(cfg)?;
            if scheme == InitScheme::Clipped {
                // strictly inside the unit ball so the margin-ε factorization exists
                let bound = (1.0 - cfg.epsilon).max(0.0);
                p.a.iter_mut().for_each(|a| *a = clip_spectral_to(a, bound));
            }
            let params = if implicit_kind { ModelParams::Implicit(p.to_implicit()) } else { ModelParams::Explicit(p) };
            Ok(InitBundle { kind, params, cert: None, projection_objective: None })
        }
    }
}

/// The five experiment variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
    D,
    E,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::A, Preset::B, Preset::C, Preset::D, Preset::E];

    pub fn kind(self) -> ModelKind {
        match self {
            Preset::A => ModelKind::CiRnn,
            Preset::B | Preset::C => ModelKind::Implicit,
            Preset::D => ModelKind::Rnn,
            Preset::E => ModelKind::SRnn,
        }
    }

    pub fn scheme(self) -> InitScheme {
        match self {
            Preset::A | Preset::B => InitScheme::Projected,
            Preset::C => InitScheme::Uniform,
            Preset::D => InitScheme::Sampled,
            Preset::E => InitScheme::Clipped,
        }
    }

    pub fn alpha(self) -> f64 {
        match self {
            Preset::A | Preset::B => 1.2,
            Preset::C | Preset::D | Preset::E => 1.0,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Preset::A => "ci-rnn, projected Gaussian init (alpha 1.2)",
            Preset::B => "unconstrained implicit, projected Gaussian init (alpha 1.2)",
            Preset::C => "unconstrained implicit, E = I, uniform W",
            Preset::D => "unconstrained explicit, Gaussian init (alpha 1)",
            Preset::E => "spectrally constrained explicit, clipped Gaussian init (alpha 1)",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            "E" => Ok(Preset::E),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected A-E)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

pub fn init_preset(preset: Preset, dims: LayerDims, seed: u64, epsilon: f64, lambda: f64) -> Result<InitBundle> {
    let cfg = InitConfig { alpha: preset.alpha(), seed, dims, epsilon, lambda };
    init_model(preset.kind(), preset.scheme(), &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contraction::{assemble_lmi, verify_certificate};
    use crate::linalg::{spectral_radius, sym_min_eig};
    use proptest::prelude::*;

    fn cfg(n: usize, layers: usize, alpha: f64, seed: u64) -> InitConfig {
        InitConfig::new(LayerDims::uniform(n, 1, 1, layers), alpha, seed)
    }

    #[test]
    fn zero_alpha_gives_zero_weights() {
        let p = sample_explicit(&cfg(5, 2, 0.0, 1)).unwrap();
        assert!(p.a.iter().all(|a| a.iter().all(|&v| v == 0.0)));
        assert!(p.d.iter().all(|&v| v == 0.0) && p.bias.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_explicit(&cfg(6, 2, 1.2, 9)).unwrap(), sample_explicit(&cfg(6, 2, 1.2, 9)).unwrap());
        assert_ne!(sample_explicit(&cfg(6, 2, 1.2, 9)).unwrap(), sample_explicit(&cfg(6, 2, 1.2, 10)).unwrap());
    }

    #[test]
    fn circular_law_radius() {
        let mean: f64 = (0..100)
            .map(|s| spectral_radius(&sample_explicit(&cfg(60, 1, 1.2, s)).unwrap().a[0]))
            .sum::<f64>()
            / 100.0;
        assert!((1.05..=1.35).contains(&mean), "mean radius {mean}");
    }

    #[test]
    fn entry_variance_matches() {
        let a = &sample_explicit(&cfg(60, 1, 1.2, 4)).unwrap().a[0];
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var / (1.44 / 60.0) - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn clip_examples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let c = clip_spectral(&a);
        assert!((c - DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]))).amax() < 1e-12);
        let small = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]);
        assert!((clip_spectral(&small) - &small).amax() < 1e-15);
        let u = DVector::from_vec(vec![0.6, 0.8]);
        let v = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let r = clip_spectral(&(&u * v.transpose() * 3.0));
        assert!((r - &u * v.transpose()).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_projection(
            vals in proptest::collection::vec(-3.0f64..3.0, 9),
            zvals in proptest::collection::vec(-1.0f64..1.0, 9),
        ) {
            let a = DMatrix::from_row_slice(3, 3, &vals);
            let c = clip_spectral(&a);
            prop_assert!(spectral_norm(&c) <= 1.0 + 1e-12);
            prop_assert!((clip_spectral(&c) - &c).amax() < 1e-10);
            let z = clip_spectral(&DMatrix::from_row_slice(3, 3, &zvals));
            prop_assert!((&c - &a).norm() <= (&z - &a).norm() + 1e-10);
        }
    }

    fn one_layer(a: DMatrix<f64>) -> ExplicitParams {
        let n = a.nrows();
        let mut p = ExplicitParams::zeros(&LayerDims::uniform(n, 1, 1, 1));
        p.a[0] = a;
        p
    }

    #[test]
    fn project_zero_weights() {
        let c = cfg(4, 2, 0.0, 0);
        let proj = project_ci(&sample_explicit(&c).unwrap(), &c).unwrap();
        assert!(proj.normalized_objective < 1e-12, "{}", proj.normalized_objective);
        assert!(proj.report.feasible);
    }

    #[test]
    fn project_half_identity() {
        // E = I, W = A/2... any scaled pair with A E = W is optimal; the block
        // [[I, 0.5I], [0.5I, I]] is feasible so the optimum is zero
        let a = DMatrix::identity(3, 3) * 0.5;
        let block = assemble_spectral_like(&a);
        assert!(sym_min_eig(&block) >= 0.5 - 1e-12);
        let c = InitConfig::new(LayerDims::uniform(3, 1, 1, 1), 1.0, 0);
        let proj = project_ci(&one_layer(a.clone()), &c).unwrap();
        assert!(proj.normalized_objective < 1e-8, "{}", proj.normalized_objective);
        let recovered = proj.params.to_explicit().unwrap().a[0].clone();
        assert!((recovered - a).amax() < 1e-4);
    }

    fn assemble_spectral_like(a: &DMatrix<f64>) -> DMatrix<f64> {
        crate::contraction::assemble_spectral(a, 0).m
    }

    #[test]
    fn project_recovers_certifiable_example() {
        // metric diag(1, 10) certifies A; the implicit point E = P = diag(1, 0.1),
        // W = A P is feasible, so projection must recover A
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 1.0, 0.0, 0.8]);
        let p = DVector::from_vec(vec![1.0, 0.1]);
        let mut known = one_layer(a.clone()).to_implicit();
        known.e[0] = DMatrix::from_diagonal(&p);
        known.w[0] = &a * DMatrix::from_diagonal(&p);
        let cert = Certificate::new(vec![p], 1.0).unwrap();
        assert!(verify_certificate(&known, &cert, 1e-9).unwrap().feasible);
        assert!(assemble_lmi(&known, &cert, 0).unwrap().min_eig() > 0.0);

        let c = InitConfig::new(LayerDims::uniform(2, 1, 1, 1), 1.0, 0);
        let proj = project_ci(&one_layer(a.clone()), &c).unwrap();
        assert!(proj.normalized_objective <= 1e-6, "{}", proj.normalized_objective);
        assert!((proj.params.to_explicit().unwrap().a[0].clone() - a).amax() < 1e-3);
    }

    #[test]
    fn projection_of_unstable_weights_is_feasible_and_restarts_agree() {
        let c = InitConfig { lambda: 0.95, ..cfg(6, 2, 1.2, 3) };
        let ex = sample_explicit(&c).unwrap();
        let p1 = project_ci(&ex, &c).unwrap();
        assert!(p1.report.feasible);
        assert!(verify_certificate(&p1.params, &p1.cert, 1e-6).unwrap().feasible);
        let p2 = project_ci_with(&ex, &c, &ProjectOptions { restart: Some(77), ..Default::default() }).unwrap();
        let rel = (p1.normalized_objective - p2.normalized_objective).abs() / p1.normalized_objective.max(1e-12);
        assert!(rel < 0.01, "{} vs {}", p1.normalized_objective, p2.normalized_objective);
        assert_eq!(p1.params.b, ex.b);
        assert_eq!(p1.params.c, ex.c);
    }

    #[test]
    fn presets_initialize() {
        let dims = LayerDims::uniform(5, 1, 1, 2);
        for preset in Preset::ALL {
            let b = init_preset(preset, dims.clone(), 2, DEFAULT_MARGIN, 1.0).unwrap();
            assert_eq!(b.kind, preset.kind());
            assert_eq!(b.params.dims(), dims);
            if preset == Preset::E {
                let ex = b.params.to_explicit().unwrap();
                assert!(ex.a.iter().all(|a| spectral_norm(a) <= 1.0 + 1e-12));
            }
            if preset == Preset::C {
                let ModelParams::Implicit(p) = &b.params else { panic!("implicit expected") };
                let bound = 1.0 / 5f64.sqrt();
                assert!(p.w.iter().all(|w| w.amax() <= bound));
                assert!(p.e.iter().all(|e| e.is_identity(0.0)));
            }
        }
        assert!("f".parse::<Preset>().is_err());
    }
}
