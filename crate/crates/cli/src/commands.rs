use std::path::{Path, PathBuf};

use cirnn::contraction::{lift_explicit, verify_certificate_at, CertReport, Certificate, DEFAULT_EIG_TOL};
use cirnn::data::{apply_normalization, generate_chen, load_manifest, normalize, write_dataset, SeqDataset, Split};
use cirnn::eval::{compare as compare_reports, evaluate, stability_stress, EvalReport, RunTag, StressSummary};
use cirnn::init::{init_model, InitConfig};
use cirnn::models::{Checkpoint, ModelKind, ModelParams};
use cirnn::nalgebra::DVector;
use cirnn::training::{train as run_training, write_history_csv, StopReason, TrainModel};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{Common, Failure};

/// Relative slack allowed on the empirical Lyapunov ratio.
const V_RATIO_SLACK: f64 = 1e-6;

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.preset.is_some() {
        cfg.preset = common.preset.clone();
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().ok_or_else(|| Failure::config("--out DIR is required"))?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn manifest_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| cfg.data.manifest.clone())
}

pub fn generate(common: &Common) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    let seed = cfg.require_seed()?;
    let chen = cfg.chen(seed)?;
    let dir = out_dir(common)?;
    let data = generate_chen(&chen)?;
    let manifest = write_dataset(&dir, &data)?;
    cfg.data.chen = Some(chen.clone());
    cfg.echo(&dir)?;
    println!(
        "wrote {} sequences x {} steps to {}",
        chen.n_seq,
        chen.t,
        manifest.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct InitSummary {
    kind: ModelKind,
    scheme: cirnn::init::InitScheme,
    alpha: f64,
    seed: u64,
    projection_objective: Option<f64>,
}

/// Draws an initialization from the resolved config.
fn fresh_init(cfg: &RunConfig, seed: u64, n_u: usize, n_y: usize) -> Result<(cirnn::init::InitBundle, InitSummary), Failure> {
    let (kind, scheme, alpha) = cfg.model_choice()?;
    let dims = cfg.model.dims(n_u, n_y)?;
    let init_cfg = InitConfig { alpha, seed, dims, epsilon: cfg.init.epsilon, lambda: cfg.init.lambda };
    let bundle = init_model(kind, scheme, &init_cfg)?;
    let summary = InitSummary { kind, scheme, alpha, seed, projection_objective: bundle.projection_objective };
    Ok((bundle, summary))
}

fn data_dims(cfg: &RunConfig, manifest: Option<&Path>) -> Result<(usize, usize), Failure> {
    match manifest {
        Some(path) => {
            let data = load_manifest(path)?;
            Ok((data.n_u(), data.n_y()))
        }
        None => Ok((cfg.model.n_u, cfg.model.n_y)),
    }
}

pub fn init(common: &Common, data: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    let seed = cfg.require_seed()?;
    let manifest = manifest_path(&cfg, data);
    let (n_u, n_y) = data_dims(&cfg, manifest.as_deref())?;
    let dir = out_dir(common)?;
    let (bundle, summary) = fresh_init(&cfg, seed, n_u, n_y)?;
    Checkpoint::new(bundle.kind, cfg.model.activation, bundle.params.clone()).save(&dir.join("model.json"))?;
    if let Some(cert) = &bundle.cert {
        cert.save(&dir.join("certificate.json"), cfg.init.epsilon)?;
    }
    write_json(&dir.join("init.json"), &summary)?;
    cfg.data.manifest = manifest;
    cfg.echo(&dir)?;
    match summary.projection_objective {
        Some(obj) => println!("initialized {} model (projection objective {obj:.6e}) in {}", summary.kind, dir.display()),
        None => println!("initialized {} model in {}", summary.kind, dir.display()),
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub seed: u64,
    pub epochs_run: usize,
    pub stop: StopReason,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub best_train_mse: Option<f64>,
    pub best_c_inf: Option<f64>,
    pub final_c_inf: f64,
    pub divergence_events: usize,
}

fn load_training_data(cfg: &RunConfig, path: &Path) -> Result<SeqDataset, Failure> {
    let data = load_manifest(path)?;
    Ok(if cfg.data.normalize { normalize(&data)? } else { data })
}

pub fn train(common: &Common, data: Option<PathBuf>, init_dir: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    let seed = cfg.require_seed()?;
    let manifest = manifest_path(&cfg, data).ok_or_else(|| Failure::config("training needs --data or data.manifest"))?;
    let dataset = load_training_data(&cfg, &manifest)?;
    let dir = out_dir(common)?;
    cfg.train.seed = seed;
    cfg.data.manifest = Some(manifest);

    let (kind, activation, params, cert) = match &init_dir {
        Some(d) => {
            let ck = Checkpoint::load(&d.join("model.json"))?;
            let cert_path = d.join("certificate.json");
            let cert = if cert_path.exists() { Some(Certificate::load(&cert_path)?.0) } else { None };
            (ck.kind, ck.activation, ck.params, cert)
        }
        None => {
            let (bundle, _) = fresh_init(&cfg, seed, dataset.n_u(), dataset.n_y())?;
            (bundle.kind, cfg.model.activation, bundle.params, bundle.cert)
        }
    };
    let model = TrainModel::new(kind, activation, &params, cert.as_ref(), cfg.init.lambda, cfg.train.epsilon, 0)?;
    let outcome = run_training(&cfg.train, &dataset, model)?;
    write_history_csv(&dir.join("history.csv"), &outcome.history)?;
    cfg.echo(&dir)?;

    let best = outcome.best.as_ref();
    let summary = TrainSummary {
        kind,
        seed,
        epochs_run: outcome.history.len(),
        stop: outcome.stop,
        best_epoch: best.map(|b| b.epoch),
        best_val_mse: best.map(|b| b.val_mse),
        best_train_mse: best.map(|b| b.train_mse),
        best_c_inf: best.map(|b| b.c_inf),
        final_c_inf: outcome.history.last().map_or(f64::NAN, |h| h.c_infnorm),
        divergence_events: outcome.divergence_events.len(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let best = outcome.best_or_err()?;
    let mut ck = best.model.checkpoint();
    ck.normalization = dataset.normalization.clone();
    ck.save(&dir.join("model.json"))?;
    if let Some(c) = best.model.certificate() {
        c.save(&dir.join("certificate.json"), cfg.train.epsilon)?;
    }
    println!(
        "trained {kind} for {} epochs ({:?}); best epoch {} with validation MSE {:.6e}",
        summary.epochs_run, summary.stop, best.epoch, best.val_mse
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct VerifyReport {
    certificate: CertReport,
    stress: StressSummary,
    passed: bool,
}

fn implicit_for(params: &ModelParams, cert: &Certificate) -> Result<cirnn::models::ImplicitParams, Failure> {
    Ok(match params {
        ModelParams::Implicit(p) => p.clone(),
        ModelParams::Explicit(p) => lift_explicit(p, cert)?,
    })
}

pub fn verify(common: &Common, model: &Path, certificate: &Path) -> Result<(), Failure> {
    let cfg = resolve(common)?;
    let ck = Checkpoint::load(model)?;
    let (cert, margin) = Certificate::load(certificate)?;
    let params = implicit_for(&ck.params, &cert)?;
    let report = verify_certificate_at(&params, &cert, margin, DEFAULT_EIG_TOL)?;
    let stress = stability_stress(
        &ModelParams::Implicit(params),
        ck.activation,
        Some(&cert),
        cfg.eval.stress_pairs,
        cfg.eval.stress_horizon,
        cfg.seed.unwrap_or(0),
    )?;
    let ratio_ok = stress.max_v_ratio.is_some_and(|v| v <= cert.lambda * (1.0 + V_RATIO_SLACK));
    let passed = report.feasible && ratio_ok && !stress.diverged;

    println!("lambda {}  margin {:e}  tolerance {:e}", report.lambda, report.margin, report.tolerance);
    for (l, (b, s)) in report.block_min_eigs.iter().zip(&report.storage_min_eigs).enumerate() {
        println!("layer {l}: block min eig {b:.6e}, storage min eig {s:.6e}");
    }
    println!("certificate: {}", if report.feasible { "feasible" } else { "infeasible" });
    println!(
        "stress: {} pairs x {} steps, growth rate {:.6}, max V ratio {}, {}",
        stress.n_pairs,
        stress.horizon,
        stress.growth_rate,
        stress.max_v_ratio.map_or("-".into(), |v| format!("{v:.6}")),
        if stress.diverged { "diverged" } else { "bounded" }
    );
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::data(e.to_string()))?;
        write_json(&dir.join("verify.json"), &VerifyReport { certificate: report.clone(), stress, passed })?;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::verification(format!(
            "certificate rejected: min eig {:.6e} against margin {:e}",
            report.min_eig(),
            report.margin
        )))
    }
}

pub fn eval(
    common: &Common,
    model: &Path,
    data: Option<PathBuf>,
    split: Option<Split>,
    certificate: Option<PathBuf>,
    fold: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    let manifest = manifest_path(&cfg, data).ok_or_else(|| Failure::config("evaluation needs --data or data.manifest"))?;
    let dir = out_dir(common)?;
    let ck = Checkpoint::load(model)?;
    let raw = load_manifest(&manifest)?;
    let dataset = match &ck.normalization {
        Some(stats) => apply_normalization(&raw, stats)?,
        None => raw,
    };
    let split = split.unwrap_or(cfg.eval.split);
    cfg.eval.split = split;
    cfg.eval.fold = fold.or(cfg.eval.fold);
    cfg.data.manifest = Some(manifest);
    let tag = RunTag { fold: cfg.eval.fold, seed: cfg.seed };
    let mut report = evaluate(ck.kind, &ck.params, ck.activation, &dataset, split, cfg.eval.washout, &tag)?;

    let cert = certificate.as_deref().map(Certificate::load).transpose()?.map(|(c, _)| c);
    let stress_model = match &cert {
        Some(c) => ModelParams::Implicit(implicit_for(&ck.params, c)?),
        None => ck.params.clone(),
    };
    report.stress = Some(stability_stress(
        &stress_model,
        ck.activation,
        cert.as_ref(),
        cfg.eval.stress_pairs,
        cfg.eval.stress_horizon,
        cfg.seed.unwrap_or(0),
    )?);
    report.save(&dir.join("report.json"))?;
    write_predictions(&dir.join("predictions.csv"), &ck, &dataset, split)?;
    cfg.echo(&dir)?;

    let nse: Vec<String> = report.nse.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.6}"))).collect();
    println!(
        "{} on {split}: NSE per channel [{}], mean {}{}",
        ck.kind,
        nse.join(", "),
        report.mean_nse.map_or("-".into(), |v| format!("{v:.6}")),
        if report.diverged { " (unbounded NSE)" } else { "" }
    );
    Ok(())
}

/// Measured and simulated outputs per step, in measured units.
fn write_predictions(path: &Path, ck: &Checkpoint, data: &SeqDataset, split: Split) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::data(e.to_string()))?;
    let mut header = vec!["sequence".to_string(), "step".to_string()];
    header.extend(data.output_names.iter().map(|n| format!("measured_{n}")));
    header.extend(data.output_names.iter().map(|n| format!("simulated_{n}")));
    w.write_record(&header).map_err(|e| Failure::data(e.to_string()))?;
    let x0 = DVector::zeros(ck.dims.n_x);
    for seq in data.split(split) {
        let traj = ck.params.simulate(ck.activation, &seq.inputs, &x0)?;
        for (k, (meas, sim)) in seq.outputs.iter().zip(&traj.outputs).enumerate() {
            let (meas, sim) = match &data.normalization {
                Some(stats) => (stats.denormalize_output(meas), stats.denormalize_output(sim)),
                None => (meas.clone(), sim.clone()),
            };
            let mut row = vec![seq.name.clone(), k.to_string()];
            row.extend(meas.iter().map(|v| v.to_string()));
            row.extend(sim.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Failure::data(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Failure::data(e.to_string()))
}

pub fn compare(common: &Common, pattern: &str) -> Result<(), Failure> {
    let dir = out_dir(common)?;
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Failure::config(format!("bad glob '{pattern}': {e}")))?
        .filter_map(std::result::Result::ok)
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::data(format!("no reports matched '{pattern}'")));
    }
    let reports = paths.iter().map(|p| EvalReport::load(p)).collect::<cirnn::Result<Vec<_>>>()?;
    let cmp = compare_reports(&reports)?;
    let text = cmp.to_text();
    std::fs::write(dir.join("comparison.txt"), &text).map_err(|e| Failure::data(e.to_string()))?;
    write_json(&dir.join("comparison.json"), &cmp)?;
    cmp.write_csv(&dir)?;
    print!("{text}");
    Ok(())
}
