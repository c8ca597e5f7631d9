//! Normalized simulation error, stability stress tests and cross-run
//! comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contraction::{empirical_contraction_test, Certificate};
use crate::data::{SeqDataset, Split};
use crate::error::{Error, Result};
use crate::models::{Activation, ModelKind, ModelParams};

/// NSE (or distance growth) above which a run counts as unbounded.
pub const OVERFLOW_GUARD: f64 = 1e6;

/// Relative size of the initial-state perturbation in stress tests.
pub const STRESS_PERTURBATION: f64 = 1e-2;

/// Per-channel `Σₜ (yₜ − ỹₜ)² / Σₜ ỹₜ²`.
pub fn nse(pred: &[DVector<f64>], meas: &[DVector<f64>]) -> Result<Vec<f64>> {
    if pred.len() != meas.len() {
        return Err(Error::Dimension(format!("{} predicted vs {} measured steps", pred.len(), meas.len())));
    }
    let Some(first) = meas.first() else {
        return Err(Error::UndefinedMetric("empty sequence".into()));
    };
    let n_y = first.len();
    let mut num = vec![0.0; n_y];
    let mut den = vec![0.0; n_y];
    for (y, m) in pred.iter().zip(meas) {
        if y.len() != n_y || m.len() != n_y {
            return Err(Error::Dimension(format!("expected {n_y} output channels")));
        }
        for c in 0..n_y {
            num[c] += (y[c] - m[c]).powi(2);
            den[c] += m[c] * m[c];
        }
    }
    num.iter()
        .zip(&den)
        .enumerate()
        .map(|(c, (n, d))| {
            if *d > 0.0 {
                Ok(n / d)
            } else {
                Err(Error::UndefinedMetric(format!("measured channel {c} is identically zero")))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ModelKind,
    pub layers: usize,
    pub fold: Option<usize>,
    pub seed: Option<u64>,
    pub split: Split,
    pub washout: usize,
    /// Per output channel; `None` where the value is not finite.
    pub nse: Vec<Option<f64>>,
    pub mean_nse: Option<f64>,
    pub mse: Option<f64>,
    /// Non-finite simulation or mean NSE above `overflow_guard`.
    pub diverged: bool,
    pub overflow_guard: f64,
    pub stress: Option<StressSummary>,
}

impl EvalReport {
    /// Mean NSE, infinite for diverged runs.
    pub fn score(&self) -> f64 {
        match (self.diverged, self.mean_nse) {
            (false, Some(v)) => v,
            _ => f64::INFINITY,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Identifies a report in comparison tables.
#[derive(Debug, Clone, Default)]
pub struct RunTag {
    pub fold: Option<usize>,
    pub seed: Option<u64>,
}

/// Simulates every sequence of `split` from the zero state and scores the
/// outputs in measured units (undoing any normalization).
pub fn evaluate(
    kind: ModelKind,
    params: &ModelParams,
    act: Activation,
    data: &SeqDataset,
    split: Split,
    washout: usize,
    tag: &RunTag,
) -> Result<EvalReport> {
    let dims = params.dims();
    if dims.n_u != data.n_u() || dims.n_y != data.n_y() {
        return Err(Error::Dimension(format!(
            "model has n_u = {}, n_y = {} but data has {}, {}",
            dims.n_u,
            dims.n_y,
            data.n_u(),
            data.n_y()
        )));
    }
    let seqs = data.split(split);
    if seqs.is_empty() {
        return Err(Error::Data(format!("no {split} sequences")));
    }
    let mut report = EvalReport {
        kind,
        layers: dims.layers(),
        fold: tag.fold,
        seed: tag.seed,
        split,
        washout,
        nse: vec![None; dims.n_y],
        mean_nse: None,
        mse: None,
        diverged: false,
        overflow_guard: OVERFLOW_GUARD,
        stress: None,
    };
    let unscale = |y: &DVector<f64>| match &data.normalization {
        Some(stats) => stats.denormalize_output(y),
        None => y.clone(),
    };
    let mut pred = Vec::new();
    let mut meas = Vec::new();
    let x0 = DVector::zeros(dims.n_x);
    for seq in seqs {
        if washout >= seq.len() {
            return Err(Error::Config(format!("washout {washout} leaves no scored steps in {}", seq.name)));
        }
        let traj = params.simulate(act, &seq.inputs, &x0)?;
        if traj.diverged || traj.outputs.len() < seq.len() || traj.outputs.iter().any(|y| !crate::linalg::all_finite(y.as_slice())) {
            report.diverged = true;
            return Ok(report);
        }
        pred.extend(traj.outputs[washout..].iter().map(unscale));
        meas.extend(seq.outputs[washout..].iter().map(unscale));
    }
    let per_channel = nse(&pred, &meas)?;
    let mean = per_channel.iter().sum::<f64>() / per_channel.len() as f64;
    let mse = pred.iter().zip(&meas).map(|(p, m)| (p - m).norm_squared()).sum::<f64>() / (pred.len() * dims.n_y) as f64;
    report.nse = per_channel.iter().map(|v| v.is_finite().then_some(*v)).collect();
    report.mean_nse = mean.is_finite().then_some(mean);
    report.mse = mse.is_finite().then_some(mse);
    report.diverged = !mean.is_finite() || mean > OVERFLOW_GUARD;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressSummary {
    pub n_pairs: usize,
    pub horizon: usize,
    /// Largest per-step geometric growth `(d_K / d_0)^(1/K)` of the state distance.
    pub growth_rate: f64,
    /// Largest `d_k / d_0` over all pairs and steps.
    pub max_distance_ratio: f64,
    pub diverged: bool,
    /// Largest `V` ratio under the supplied certificate.
    pub max_v_ratio: Option<f64>,
    pub lambda: Option<f64>,
}

/// Simulates pairs of trajectories from nearby initial states under shared
/// Gaussian inputs and reports how their distance evolves.
pub fn stability_stress(
    params: &ModelParams,
    act: Activation,
    cert: Option<&Certificate>,
    n_pairs: usize,
    horizon: usize,
    seed: u64,
) -> Result<StressSummary> {
    let dims = params.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |n: usize| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let implicit = params.as_implicit();
    let mut summary = StressSummary {
        n_pairs,
        horizon,
        growth_rate: 0.0,
        max_distance_ratio: 0.0,
        diverged: false,
        max_v_ratio: cert.map(|_| 0.0),
        lambda: cert.map(|c| c.lambda),
    };
    for _ in 0..n_pairs {
        let u: Vec<DVector<f64>> = (0..horizon).map(|_| gauss(dims.n_u)).collect();
        let xa = gauss(dims.n_x);
        let dir = gauss(dims.n_x);
        let xb = &xa + dir.normalize() * (STRESS_PERTURBATION * xa.norm().max(1.0));
        let ta = params.simulate(act, &u, &xa)?;
        let tb = params.simulate(act, &u, &xb)?;
        let d0 = (&xa - &xb).norm();
        let mut last = d0;
        let steps = ta.states.len().min(tb.states.len());
        for k in 0..steps {
            let d = (&ta.states[k] - &tb.states[k]).norm();
            if !d.is_finite() {
                summary.diverged = true;
                break;
            }
            summary.max_distance_ratio = summary.max_distance_ratio.max(d / d0);
            last = d;
        }
        if ta.diverged || tb.diverged || steps < horizon {
            summary.diverged = true;
        }
        if steps > 1 {
            let rate = (last / d0).powf(1.0 / (steps - 1) as f64);
            summary.growth_rate = summary.growth_rate.max(rate);
        }
        if let (Some(c), Some(v)) = (cert, summary.max_v_ratio.as_mut()) {
            let trace = empirical_contraction_test(&implicit, act, c, &u, &xa, &xb)?;
            *v = v.max(trace.max_ratio);
            summary.diverged |= trace.diverged;
        }
    }
    if !(summary.max_distance_ratio <= OVERFLOW_GUARD) {
        summary.diverged = true;
    }
    Ok(summary)
}

/// Type-7 quantile of sorted values.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub kind: ModelKind,
    pub layers: usize,
    pub runs: usize,
    /// Runs classified as unbounded NSE; excluded from the quantiles.
    pub unbounded: usize,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub kind: ModelKind,
    pub layers: usize,
    pub fold: Option<usize>,
    pub seed: Option<u64>,
    pub mean_nse: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub groups: Vec<GroupSummary>,
    pub rows: Vec<RunRow>,
    /// Fraction of matched (layers, fold, seed) pairs where ci-rnn has the
    /// lower NSE; ties count one half. `None` without matched pairs.
    pub ci_vs_s_win_rate: Option<f64>,
    pub matched_pairs: usize,
    pub unbounded: Vec<RunRow>,
}

fn kind_rank(k: ModelKind) -> u8 {
    match k {
        ModelKind::Rnn => 0,
        ModelKind::SRnn => 1,
        ModelKind::CiRnn => 2,
        ModelKind::Implicit => 3,
    }
}

type RowKey = (u8, usize, Option<usize>, Option<u64>);

fn row_key(r: &RunRow) -> (RowKey, u64) {
    ((kind_rank(r.kind), r.layers, r.fold, r.seed), r.mean_nse.map_or(u64::MAX, f64::to_bits))
}

pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to compare".into()));
    }
    let mut rows: Vec<RunRow> = reports
        .iter()
        .map(|r| RunRow { kind: r.kind, layers: r.layers, fold: r.fold, seed: r.seed, mean_nse: r.mean_nse, diverged: r.diverged })
        .collect();
    rows.sort_by_key(|r| (row_key(r), r.diverged));

    let mut grouped: BTreeMap<(u8, usize), Vec<&RunRow>> = BTreeMap::new();
    for r in &rows {
        grouped.entry((kind_rank(r.kind), r.layers)).or_default().push(r);
    }
    let groups = grouped
        .values()
        .map(|members| {
            let mut finite: Vec<f64> = members.iter().filter(|r| !r.diverged).filter_map(|r| r.mean_nse).collect();
            finite.sort_by(f64::total_cmp);
            GroupSummary {
                kind: members[0].kind,
                layers: members[0].layers,
                runs: members.len(),
                unbounded: members.len() - finite.len(),
                min: quantile(&finite, 0.0),
                q1: quantile(&finite, 0.25),
                median: quantile(&finite, 0.5),
                q3: quantile(&finite, 0.75),
                max: quantile(&finite, 1.0),
            }
        })
        .collect();

    let score = |r: &RunRow| if r.diverged { f64::INFINITY } else { r.mean_nse.unwrap_or(f64::INFINITY) };
    let mut wins = 0.0;
    let mut pairs = 0;
    for ci in rows.iter().filter(|r| r.kind == ModelKind::CiRnn) {
        for s in rows.iter().filter(|r| r.kind == ModelKind::SRnn && (r.layers, r.fold, r.seed) == (ci.layers, ci.fold, ci.seed)) {
            pairs += 1;
            let (a, b) = (score(ci), score(s));
            if a < b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    let unbounded = rows.iter().filter(|r| r.diverged).cloned().collect();
    Ok(Comparison {
        groups,
        rows,
        ci_vs_s_win_rate: (pairs > 0).then(|| wins / pairs as f64),
        matched_pairs: pairs,
        unbounded,
    })
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn fmt_nse(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl Comparison {
    /// Plain-text tables: per-group quantiles, per-run NSE, unbounded runs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "NSE by model kind and depth (unbounded runs excluded)");
        let _ = writeln!(
            out,
            "{:<9} {:>6} {:>5} {:>9} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "kind", "layers", "runs", "unbounded", "min", "q1", "median", "q3", "max"
        );
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<9} {:>6} {:>5} {:>9} {:>10} {:>10} {:>10} {:>10} {:>10}",
                g.kind.as_str(),
                g.layers,
                g.runs,
                g.unbounded,
                fmt_nse(g.min),
                fmt_nse(g.q1),
                fmt_nse(g.median),
                fmt_nse(g.q3),
                fmt_nse(g.max)
            );
        }
        let _ = writeln!(out, "\nPer-run NSE");
        let _ = writeln!(out, "{:<9} {:>6} {:>5} {:>6} {:>12}  status", "kind", "layers", "fold", "seed", "mean_nse");
        for r in &self.rows {
            let status = if r.diverged { "unbounded NSE" } else { "ok" };
            let _ = writeln!(
                out,
                "{:<9} {:>6} {:>5} {:>6} {:>12}  {status}",
                r.kind.as_str(),
                r.layers,
                fmt_opt(r.fold),
                fmt_opt(r.seed),
                fmt_nse(r.mean_nse)
            );
        }
        let _ = writeln!(
            out,
            "\nci-rnn vs s-rnn win rate: {} over {} matched pairs",
            self.ci_vs_s_win_rate.map_or_else(|| "absent".to_string(), |v| format!("{v:.3}")),
            self.matched_pairs
        );
        let _ = writeln!(out, "unbounded NSE runs: {}", self.unbounded.len());
        for r in &self.unbounded {
            let _ = writeln!(out, "  {} layers={} fold={} seed={}", r.kind, r.layers, fmt_opt(r.fold), fmt_opt(r.seed));
        }
        out
    }

    /// Writes `groups.csv` and `runs.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("groups.csv"))?;
        w.write_record(["kind", "layers", "runs", "unbounded", "min", "q1", "median", "q3", "max"])?;
        for g in &self.groups {
            w.write_record([
                g.kind.to_string(),
                g.layers.to_string(),
                g.runs.to_string(),
                g.unbounded.to_string(),
                fmt_opt(g.min),
                fmt_opt(g.q1),
                fmt_opt(g.median),
                fmt_opt(g.q3),
                fmt_opt(g.max),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("runs.csv"))?;
        w.write_record(["kind", "layers", "fold", "seed", "mean_nse", "unbounded"])?;
        for r in &self.rows {
            w.write_record([
                r.kind.to_string(),
                r.layers.to_string(),
                fmt_opt(r.fold),
                fmt_opt(r.seed),
                fmt_opt(r.mean_nse),
                r.diverged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sequence;
    use crate::models::{ExplicitParams, LayerDims};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn series(v: &[[f64; 2]]) -> Vec<DVector<f64>> {
        v.iter().map(|r| DVector::from_row_slice(r)).collect()
    }

    #[test]
    fn nse_examples() {
        let m = series(&[[1.0, -2.0], [0.5, 3.0], [2.0, 0.1]]);
        assert_eq!(nse(&m, &m).unwrap(), vec![0.0, 0.0]);
        let zero = series(&[[0.0, 0.0]; 3]);
        assert_eq!(nse(&zero, &m).unwrap(), vec![1.0, 1.0]);
        let double: Vec<_> = m.iter().map(|v| v * 2.0).collect();
        let r = nse(&double, &m).unwrap();
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn nse_zero_denominator_is_an_error() {
        let m = series(&[[1.0, 0.0], [2.0, 0.0]]);
        assert!(matches!(nse(&m, &m), Err(Error::UndefinedMetric(_))));
        assert!(matches!(nse(&m[..1], &m), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn nse_is_scale_invariant(
            vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.1f64..5.0), 2..20),
            a in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
        ) {
            let pred: Vec<_> = vals.iter().map(|(p, _, _)| DVector::from_element(1, *p)).collect();
            let meas: Vec<_> = vals.iter().map(|(_, _, m)| DVector::from_element(1, *m)).collect();
            let base = nse(&pred, &meas).unwrap()[0];
            let sp: Vec<_> = pred.iter().map(|v| v * a).collect();
            let sm: Vec<_> = meas.iter().map(|v| v * a).collect();
            let scaled = nse(&sp, &sm).unwrap()[0];
            prop_assert!(base >= 0.0);
            prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
        }
    }

    fn scalar_model(a: f64) -> ModelParams {
        let dims = LayerDims::uniform(1, 1, 1, 1);
        let mut p = ExplicitParams::zeros(&dims);
        p.a[0] = DMatrix::from_element(1, 1, a);
        p.c = DMatrix::from_element(1, 1, 1.0);
        ModelParams::Explicit(p)
    }

    #[test]
    fn expansive_linear_model_is_flagged() {
        let s = stability_stress(&scalar_model(1.5), Activation::Identity, None, 4, 200, 1).unwrap();
        assert!((s.growth_rate - 1.5).abs() < 1e-9, "{}", s.growth_rate);
        assert!(s.diverged);
        assert!(s.max_v_ratio.is_none());
    }

    #[test]
    fn contracting_scalar_with_certificate() {
        let cert = Certificate::identity(&[1, 1], 1.0);
        let s = stability_stress(&scalar_model(0.5), Activation::Identity, Some(&cert), 3, 100, 2).unwrap();
        assert!(!s.diverged);
        assert!((s.growth_rate - 0.5).abs() < 1e-9);
        let v = s.max_v_ratio.unwrap();
        assert!((v - 0.25).abs() < 1e-9, "{v}");
    }

    #[test]
    fn zero_model_is_bounded() {
        let dims = LayerDims::uniform(3, 2, 2, 2);
        let p = ModelParams::Explicit(ExplicitParams::zeros(&dims));
        let s = stability_stress(&p, Activation::Tanh, None, 5, 50, 3).unwrap();
        assert!(!s.diverged);
        assert_eq!(s.growth_rate, 0.0);
        assert!((s.max_distance_ratio - 1.0).abs() < 1e-12);
    }

    fn dataset(outputs: Vec<f64>) -> SeqDataset {
        let n = outputs.len();
        SeqDataset {
            input_names: vec!["u".into()],
            output_names: vec!["y".into()],
            sequences: vec![Sequence {
                name: "s".into(),
                inputs: vec![DVector::from_element(1, 1.0); n],
                outputs: outputs.into_iter().map(|v| DVector::from_element(1, v)).collect(),
                split: Split::Test,
            }],
            normalization: None,
        }
    }

    #[test]
    fn zero_predictor_scores_one_and_expansive_model_diverges() {
        let data = dataset(vec![1.0, -2.0, 0.5, 3.0]);
        let dims = LayerDims::uniform(1, 1, 1, 1);
        let zero = ModelParams::Explicit(ExplicitParams::zeros(&dims));
        let r = evaluate(ModelKind::Rnn, &zero, Activation::Tanh, &data, Split::Test, 0, &RunTag::default()).unwrap();
        assert_eq!(r.nse, vec![Some(1.0)]);
        assert!(!r.diverged);

        let mut wild = ExplicitParams::zeros(&dims);
        wild.a[0][(0, 0)] = 1e80;
        wild.b[0][(0, 0)] = 1.0;
        wild.c[(0, 0)] = 1.0;
        let r = evaluate(ModelKind::Rnn, &ModelParams::Explicit(wild), Activation::Identity, &data, Split::Test, 0, &RunTag::default()).unwrap();
        assert!(r.diverged);
        assert_eq!(r.score(), f64::INFINITY);
    }

    #[test]
    fn washout_and_missing_split() {
        let data = dataset(vec![100.0, 1.0, 1.0]);
        let dims = LayerDims::uniform(1, 1, 1, 1);
        let zero = ModelParams::Explicit(ExplicitParams::zeros(&dims));
        let r = evaluate(ModelKind::Rnn, &zero, Activation::Tanh, &data, Split::Test, 1, &RunTag::default()).unwrap();
        assert_eq!(r.mse, Some(1.0));
        assert!(evaluate(ModelKind::Rnn, &zero, Activation::Tanh, &data, Split::Train, 0, &RunTag::default()).is_err());
    }

    fn report(kind: ModelKind, seed: u64, nse: f64, diverged: bool) -> EvalReport {
        EvalReport {
            kind,
            layers: 2,
            fold: Some(0),
            seed: Some(seed),
            split: Split::Test,
            washout: 0,
            nse: vec![Some(nse)],
            mean_nse: Some(nse),
            mse: Some(nse),
            diverged,
            overflow_guard: OVERFLOW_GUARD,
            stress: None,
        }
    }

    #[test]
    fn quantiles_type_seven() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.25), Some(1.75));
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        assert_eq!(quantile(&[7.0], 0.75), Some(7.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn compare_examples() {
        let one = compare(&[report(ModelKind::CiRnn, 0, 0.2, false)]).unwrap();
        assert_eq!(one.groups.len(), 1);
        assert_eq!(one.ci_vs_s_win_rate, None);
        assert!(one.to_text().contains("absent"));

        let nses = [0.1, 0.3, 0.2];
        let mut all: Vec<EvalReport> = nses.iter().enumerate().map(|(i, v)| report(ModelKind::CiRnn, i as u64, *v, false)).collect();
        all.extend(nses.iter().enumerate().map(|(i, v)| report(ModelKind::SRnn, i as u64, *v, false)));
        assert_eq!(compare(&all).unwrap().ci_vs_s_win_rate, Some(0.5));

        let mixed = vec![report(ModelKind::Rnn, 0, 0.4, false), report(ModelKind::Rnn, 1, 3e7, true), report(ModelKind::Rnn, 2, 0.6, false)];
        let c = compare(&mixed).unwrap();
        assert_eq!(c.groups[0].unbounded, 1);
        assert_eq!(c.groups[0].max, Some(0.6));
        assert_eq!(c.unbounded.len(), 1);
        assert!(c.to_text().contains("unbounded NSE"));
        assert!(compare(&[]).is_err());
    }

    proptest! {
        #[test]
        fn compare_is_permutation_invariant(
            runs in proptest::collection::vec((0usize..3, 0u64..3, 0.0f64..2.0, any::<bool>()), 1..12),
            rot in 0usize..12,
        ) {
            let kinds = [ModelKind::Rnn, ModelKind::SRnn, ModelKind::CiRnn];
            let reports: Vec<EvalReport> = runs.iter().map(|(k, s, v, d)| report(kinds[*k], *s, *v, *d)).collect();
            let mut shuffled = reports.clone();
            shuffled.reverse();
            let n = shuffled.len();
            shuffled.rotate_left(rot % n);
            prop_assert_eq!(compare(&reports).unwrap(), compare(&shuffled).unwrap());
        }
    }

    #[test]
    fn csv_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let c = compare(&[report(ModelKind::CiRnn, 0, 0.2, false), report(ModelKind::SRnn, 0, 0.3, false)]).unwrap();
        assert_eq!(c.ci_vs_s_win_rate, Some(1.0));
        c.write_csv(dir.path()).unwrap();
        let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert_eq!(runs.lines().count(), 3);
        assert!(dir.path().join("groups.csv").exists());
    }

    #[test]
    fn report_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = report(ModelKind::Rnn, 1, 0.5, true);
        r.mean_nse = None;
        r.nse = vec![None];
        let path = dir.path().join("r.json");
        r.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), r);
    }
}
