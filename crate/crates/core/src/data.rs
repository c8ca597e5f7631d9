//! Sequence datasets: the modified Chen benchmark, delimited-text ingestion,
//! folds and train-split normalization.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const SCALE_FLOOR: f64 = 1e-12;
const SEGMENT_COLUMN: &str = "segment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One measured input/output record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub split: Split,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Per-channel standardization, fitted on training sequences only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_scale: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl NormStats {
    pub fn normalize_input(&self, u: &DVector<f64>) -> DVector<f64> {
        affine(u, &self.input_mean, &self.input_scale, false)
    }

    pub fn normalize_output(&self, y: &DVector<f64>) -> DVector<f64> {
        affine(y, &self.output_mean, &self.output_scale, false)
    }

    pub fn denormalize_input(&self, u: &DVector<f64>) -> DVector<f64> {
        affine(u, &self.input_mean, &self.input_scale, true)
    }

    pub fn denormalize_output(&self, y: &DVector<f64>) -> DVector<f64> {
        affine(y, &self.output_mean, &self.output_scale, true)
    }
}

fn affine(v: &DVector<f64>, mean: &[f64], scale: &[f64], inverse: bool) -> DVector<f64> {
    DVector::from_iterator(
        v.len(),
        v.iter().enumerate().map(|(i, &x)| if inverse { x * scale[i] + mean[i] } else { (x - mean[i]) / scale[i] }),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqDataset {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub sequences: Vec<Sequence>,
    /// Present once [`normalize`] has been applied.
    pub normalization: Option<NormStats>,
}

impl SeqDataset {
    pub fn n_u(&self) -> usize {
        self.input_names.len()
    }

    pub fn n_y(&self) -> usize {
        self.output_names.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.sequences.iter().enumerate().filter(|(_, s)| s.split == split).map(|(i, _)| i).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Sequence> {
        self.sequences.iter().filter(|s| s.split == split).collect()
    }

    /// Relabels sequences according to a fold; test sequences are left alone.
    pub fn with_fold(&self, fold: &Fold) -> SeqDataset {
        let mut out = self.clone();
        for &i in &fold.train {
            out.sequences[i].split = Split::Train;
        }
        for &i in &fold.val {
            out.sequences[i].split = Split::Val;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.sequences {
            if s.inputs.len() != s.outputs.len() {
                return Err(Error::Data(format!("sequence '{}' has ragged input/output lengths", s.name)));
            }
            if s.inputs.is_empty() {
                return Err(Error::Data(format!("sequence '{}' is empty", s.name)));
            }
            if s.inputs.iter().any(|u| u.len() != self.n_u()) || s.outputs.iter().any(|y| y.len() != self.n_y()) {
                return Err(Error::Data(format!("sequence '{}' has wrong channel counts", s.name)));
            }
        }
        Ok(())
    }
}

/// Parameters of the modified Chen system
/// `xₖ = g[(0.8 − 0.5e^{−x²ₖ₋₁})xₖ₋₁ − (0.3 + 0.9e^{−x²ₖ₋₁})xₖ₋₂ + uₖ₋₁ + 0.2uₖ₋₂ + 0.1uₖ₋₁uₖ₋₂ + wₖ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChenConfig {
    /// Samples per sequence.
    pub t: usize,
    pub n_seq: usize,
    /// Variance of the process noise `w`.
    pub noise_variance: f64,
    /// Variance of the input `u`.
    pub input_variance: f64,
    pub gain: f64,
    pub seed: u64,
    /// Fraction of sequences labeled validation (at least one when `n_seq ≥ 2`).
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for ChenConfig {
    fn default() -> Self {
        ChenConfig::desk(0)
    }
}

impl ChenConfig {
    /// 4 sequences × 250 steps.
    pub fn desk(seed: u64) -> Self {
        ChenConfig {
            t: 250,
            n_seq: 4,
            noise_variance: 0.5,
            input_variance: 1.0,
            gain: 1.4,
            seed,
            val_fraction: 0.1,
            test_fraction: 0.0,
        }
    }

    /// 20 sequences × 500 steps.
    pub fn full(seed: u64) -> Self {
        ChenConfig { t: 500, n_seq: 20, ..ChenConfig::desk(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance >= 0.0 && self.input_variance >= 0.0) {
            return Err(Error::Config("variances must be non-negative".into()));
        }
        if self.t == 0 || self.n_seq == 0 {
            return Err(Error::Config("sequence length and count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("split fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One evaluation of the Chen recursion given the two previous states and inputs.
pub fn chen_step(x1: f64, x2: f64, u1: f64, u2: f64, w: f64, gain: f64) -> f64 {
    let g = (-x1 * x1).exp();
    gain * ((0.8 - 0.5 * g) * x1 - (0.3 + 0.9 * g) * x2 + u1 + 0.2 * u2 + 0.1 * u1 * u2 + w)
}

/// Input and noise draws for the Chen generator.
pub struct ChenSampler {
    rng: ChaCha8Rng,
    input: Normal<f64>,
    noise: Normal<f64>,
}

impl ChenSampler {
    pub fn new(cfg: &ChenConfig) -> Result<Self> {
        cfg.validate()?;
        let normal = |var: f64| Normal::new(0.0, var.sqrt()).map_err(|e| Error::Config(e.to_string()));
        Ok(ChenSampler {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            input: normal(cfg.input_variance)?,
            noise: normal(cfg.noise_variance)?,
        })
    }

    pub fn input(&mut self) -> f64 {
        self.input.sample(&mut self.rng)
    }

    pub fn noise(&mut self) -> f64 {
        self.noise.sample(&mut self.rng)
    }
}

/// Generates the Chen benchmark. Histories start at zero and the measured
/// output is the state itself.
pub fn generate_chen(cfg: &ChenConfig) -> Result<SeqDataset> {
    let mut sampler = ChenSampler::new(cfg)?;
    let n_test = (cfg.test_fraction * cfg.n_seq as f64).round() as usize;
    let mut n_val = (cfg.val_fraction * cfg.n_seq as f64).round() as usize;
    if cfg.val_fraction > 0.0 && n_val == 0 && cfg.n_seq >= 2 {
        n_val = 1;
    }
    if n_val + n_test >= cfg.n_seq {
        return Err(Error::Config("no sequences left for training".into()));
    }
    let n_train = cfg.n_seq - n_val - n_test;

    let mut sequences = Vec::with_capacity(cfg.n_seq);
    for s in 0..cfg.n_seq {
        let u: Vec<f64> = (0..cfg.t).map(|_| sampler.input()).collect();
        let mut x = vec![0.0; cfg.t];
        for k in 0..cfg.t {
            let w = sampler.noise();
            let at = |v: &[f64], lag: usize| if k >= lag { v[k - lag] } else { 0.0 };
            x[k] = chen_step(at(&x, 1), at(&x, 2), at(&u, 1), at(&u, 2), w, cfg.gain);
        }
        let split = if s < n_train {
            Split::Train
        } else if s < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        sequences.push(Sequence {
            name: format!("chen_{s:03}"),
            inputs: u.iter().map(|&v| DVector::from_element(1, v)).collect(),
            outputs: x.iter().map(|&v| DVector::from_element(1, v)).collect(),
            split,
        });
    }
    Ok(SeqDataset {
        input_names: vec!["u1".into()],
        output_names: vec!["y1".into()],
        sequences,
        normalization: None,
    })
}

/// Reads a comma-separated file with a header row of channel names.
///
/// A column named `segment`, when present, splits the file into one sequence
/// per contiguous run of equal segment labels.
pub fn load_timeseries(path: &Path, input_channels: &[String], output_channels: &[String]) -> Result<SeqDataset> {
    let text = std::fs::read_to_string(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence");
    parse_timeseries(&text, stem, input_channels, output_channels)
}

pub fn parse_timeseries(text: &str, name: &str, input_channels: &[String], output_channels: &[String]) -> Result<SeqDataset> {
    if text.trim().is_empty() {
        return Err(Error::Data(format!("'{name}' is empty")));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let column = |ch: &String| {
        header
            .iter()
            .position(|h| h == ch)
            .ok_or_else(|| Error::Data(format!("channel '{ch}' not found in '{name}'")))
    };
    let in_cols = input_channels.iter().map(column).collect::<Result<Vec<_>>>()?;
    let out_cols = output_channels.iter().map(column).collect::<Result<Vec<_>>>()?;
    let seg_col = header.iter().position(|h| h == SEGMENT_COLUMN);

    let mut sequences: Vec<Sequence> = Vec::new();
    let mut current_segment: Option<String> = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("'{name}' row {}: {e}", row + 2)))?;
        let value = |col: usize| -> Result<f64> {
            record
                .get(col)
                .ok_or_else(|| Error::Data(format!("'{name}' row {} is short", row + 2)))?
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("'{name}' row {} column '{}': {e}", row + 2, header[col])))
        };
        let u = in_cols.iter().map(|&c| value(c)).collect::<Result<Vec<_>>>()?;
        let y = out_cols.iter().map(|&c| value(c)).collect::<Result<Vec<_>>>()?;
        let segment = seg_col.and_then(|c| record.get(c)).map(str::to_string);
        if sequences.is_empty() || segment != current_segment {
            let seq_name = match &segment {
                Some(s) => format!("{name}:{s}"),
                None => name.to_string(),
            };
            sequences.push(Sequence { name: seq_name, inputs: Vec::new(), outputs: Vec::new(), split: Split::Train });
            current_segment = segment;
        }
        let seq = sequences.last_mut().unwrap();
        seq.inputs.push(DVector::from_vec(u));
        seq.outputs.push(DVector::from_vec(y));
    }
    if sequences.is_empty() {
        return Err(Error::Data(format!("'{name}' has a header but no samples")));
    }
    let ds = SeqDataset {
        input_names: input_channels.to_vec(),
        output_names: output_channels.to_vec(),
        sequences,
        normalization: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes one sequence as delimited text with a channel header.
pub fn write_sequence_csv(path: &Path, ds: &SeqDataset, seq: &Sequence) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<&str> = ds.input_names.iter().chain(&ds.output_names).map(String::as_str).collect();
    w.write_record(&header)?;
    for (u, y) in seq.inputs.iter().zip(&seq.outputs) {
        let row: Vec<String> = u.iter().chain(y.iter()).map(|v| format!("{v:?}")).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
}

/// Lists sequence files and their split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Loads every file of a manifest, relative paths resolved against its directory.
pub fn load_manifest(path: &Path) -> Result<SeqDataset> {
    let (manifest, base) = Manifest::load(path)?;
    if manifest.sequences.is_empty() {
        return Err(Error::Data("manifest lists no sequences".into()));
    }
    let mut sequences = Vec::new();
    for entry in &manifest.sequences {
        let file = base.join(&entry.path);
        let part = load_timeseries(&file, &manifest.inputs, &manifest.outputs)?;
        sequences.extend(part.sequences.into_iter().map(|mut s| {
            s.split = entry.split;
            s
        }));
    }
    let ds = SeqDataset {
        input_names: manifest.inputs,
        output_names: manifest.outputs,
        sequences,
        normalization: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `<name>.csv` per sequence and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, ds: &SeqDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut entries = Vec::with_capacity(ds.sequences.len());
    for seq in &ds.sequences {
        let base: String = seq.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
        let count = seen.entry(base.clone()).or_insert(0);
        let file = if *count == 0 { format!("{base}.csv") } else { format!("{base}_{count}.csv") };
        *count += 1;
        write_sequence_csv(&dir.join(&file), ds, seq)?;
        entries.push(ManifestEntry { path: file, split: seq.split });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        inputs: ds.input_names.clone(),
        outputs: ds.output_names.clone(),
        sequences: entries,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Training/validation indices of one fold (indices into `SeqDataset::sequences`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Contiguous k-fold split over every non-test sequence.
pub fn kfold(ds: &SeqDataset, k: usize) -> Result<Vec<Fold>> {
    let pool: Vec<usize> = ds
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split != Split::Test)
        .map(|(i, _)| i)
        .collect();
    kfold_indices(&pool, k)
}

pub fn kfold_indices(pool: &[usize], k: usize) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > pool.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} available sequences", pool.len())));
    }
    let n = pool.len();
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|index| {
            let size = base + usize::from(index < extra);
            let val: Vec<usize> = pool[start..start + size].to_vec();
            let train = pool[..start].iter().chain(&pool[start + size..]).copied().collect();
            start += size;
            Fold { index, train, val }
        })
        .collect())
}

/// Standardizes every channel with statistics of the training sequences.
pub fn normalize(ds: &SeqDataset) -> Result<SeqDataset> {
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Data("normalization needs at least one training sequence".into()));
    }
    let mut warnings = Vec::new();
    let mut stats = |names: &[String], pick: &dyn Fn(&Sequence) -> &Vec<DVector<f64>>| {
        let mut mean = vec![0.0; names.len()];
        let mut scale = vec![0.0; names.len()];
        for (c, name) in names.iter().enumerate() {
            let values: Vec<f64> = train.iter().flat_map(|s| pick(s).iter().map(move |v| v[c])).collect();
            let n = values.len() as f64;
            let m = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let mut sd = var.sqrt();
            if !(sd > SCALE_FLOOR) {
                warnings.push(format!("channel '{name}' has zero variance; scale floored at {SCALE_FLOOR:e}"));
                sd = SCALE_FLOOR;
            }
            mean[c] = m;
            scale[c] = sd;
        }
        (mean, scale)
    };
    let (input_mean, input_scale) = stats(&ds.input_names, &|s| &s.inputs);
    let (output_mean, output_scale) = stats(&ds.output_names, &|s| &s.outputs);
    let norm = NormStats { input_mean, input_scale, output_mean, output_scale, warnings };
    apply_normalization(ds, &norm)
}

/// Standardizes raw data with previously fitted statistics.
pub fn apply_normalization(ds: &SeqDataset, norm: &NormStats) -> Result<SeqDataset> {
    if ds.normalization.is_some() {
        return Err(Error::Data("dataset is already normalized".into()));
    }
    if norm.input_mean.len() != ds.n_u() || norm.output_mean.len() != ds.n_y() {
        return Err(Error::Dimension("normalization statistics do not match the channels".into()));
    }
    let sequences = ds
        .sequences
        .iter()
        .map(|s| Sequence {
            name: s.name.clone(),
            inputs: s.inputs.iter().map(|u| norm.normalize_input(u)).collect(),
            outputs: s.outputs.iter().map(|y| norm.normalize_output(y)).collect(),
            split: s.split,
        })
        .collect();
    Ok(SeqDataset {
        input_names: ds.input_names.clone(),
        output_names: ds.output_names.clone(),
        sequences,
        normalization: Some(norm.clone()),
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(ds: &SeqDataset) -> SeqDataset {
    let Some(norm) = &ds.normalization else {
        return ds.clone();
    };
    SeqDataset {
        input_names: ds.input_names.clone(),
        output_names: ds.output_names.clone(),
        sequences: ds
            .sequences
            .iter()
            .map(|s| Sequence {
                name: s.name.clone(),
                inputs: s.inputs.iter().map(|u| norm.denormalize_input(u)).collect(),
                outputs: s.outputs.iter().map(|y| norm.denormalize_output(y)).collect(),
                split: s.split,
            })
            .collect(),
        normalization: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn toy(n: usize) -> SeqDataset {
        SeqDataset {
            input_names: names(&["u"]),
            output_names: names(&["y"]),
            sequences: (0..n)
                .map(|i| Sequence {
                    name: format!("s{i}"),
                    inputs: (0..5).map(|k| DVector::from_element(1, (i * 5 + k) as f64)).collect(),
                    outputs: (0..5).map(|k| DVector::from_element(1, 2.0 * k as f64)).collect(),
                    split: Split::Train,
                })
                .collect(),
            normalization: None,
        }
    }

    #[test]
    fn chen_fixed_point_and_single_input() {
        assert_eq!(chen_step(0.0, 0.0, 0.0, 0.0, 0.0, 1.4), 0.0);
        assert!((chen_step(0.0, 0.0, 1.0, 0.0, 0.0, 1.4) - 1.4).abs() < 1e-15);
        let cfg = ChenConfig { noise_variance: 0.0, input_variance: 0.0, ..ChenConfig::desk(3) };
        let ds = generate_chen(&cfg).unwrap();
        assert!(ds.sequences.iter().all(|s| s.outputs.iter().all(|y| y[0] == 0.0)));
    }

    #[test]
    fn chen_noise_variance() {
        let mut sampler = ChenSampler::new(&ChenConfig::desk(11)).unwrap();
        let draws: Vec<f64> = (0..100_000).map(|_| sampler.noise()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((var - 0.5).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn chen_reproducible_and_split() {
        let a = generate_chen(&ChenConfig::desk(5)).unwrap();
        let b = generate_chen(&ChenConfig::desk(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sequences.len(), 4);
        assert_eq!(a.indices(Split::Val).len(), 1);
        assert!(a.sequences.iter().all(|s| s.len() == 250));
        let p = generate_chen(&ChenConfig::full(5)).unwrap();
        assert_eq!((p.sequences.len(), p.sequences[0].len()), (20, 500));
        assert_ne!(a, generate_chen(&ChenConfig::desk(6)).unwrap());
    }

    #[test]
    fn timeseries_parse() {
        let mut text = String::from("u1,u2,y1\n");
        for k in 0..100 {
            text.push_str(&format!("{},{},{}\n", k, 2 * k, 0.5 * k as f64));
        }
        let ds = parse_timeseries(&text, "f", &names(&["u1", "u2"]), &names(&["y1"])).unwrap();
        assert_eq!((ds.n_u(), ds.n_y(), ds.sequences.len(), ds.sequences[0].len()), (2, 1, 1, 100));
        assert_eq!(ds.sequences[0].inputs[3], DVector::from_row_slice(&[3.0, 6.0]));
    }

    #[test]
    fn timeseries_errors() {
        let err = parse_timeseries("u1,y1\n1,2\n", "f", &names(&["u1", "u9"]), &names(&["y1"])).unwrap_err();
        assert!(err.to_string().contains("u9"));
        assert!(parse_timeseries("", "f", &names(&["u1"]), &names(&["y1"])).is_err());
        assert!(parse_timeseries("u1,y1\n", "f", &names(&["u1"]), &names(&["y1"])).is_err());
        assert!(parse_timeseries("u1,y1\n1,2\n3\n", "f", &names(&["u1"]), &names(&["y1"])).is_err());
        assert!(parse_timeseries("u1,y1\n1,abc\n", "f", &names(&["u1"]), &names(&["y1"])).is_err());
    }

    #[test]
    fn timeseries_segments() {
        let text = "segment,u,y\na,1,2\na,2,3\nb,4,5\n";
        let ds = parse_timeseries(text, "f", &names(&["u"]), &names(&["y"])).unwrap();
        assert_eq!(ds.sequences.len(), 2);
        assert_eq!(ds.sequences[1].len(), 1);
    }

    #[test]
    fn folds() {
        let f = kfold(&toy(9), 9).unwrap();
        assert_eq!(f.len(), 9);
        assert!(f.iter().all(|x| x.train.len() == 8 && x.val.len() == 1));
        let f = kfold(&toy(4), 2).unwrap();
        assert!(f.iter().all(|x| x.train.len() == 2 && x.val.len() == 2));
        assert!(kfold(&toy(4), 1).is_err());
        assert!(kfold(&toy(3), 4).is_err());
        let f = kfold(&toy(10), 3).unwrap();
        let mut seen: Vec<usize> = f.iter().flat_map(|x| x.val.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn normalization_roundtrip_and_constant_channel() {
        let ds = toy(3);
        let n = normalize(&ds).unwrap();
        let stats = n.normalization.as_ref().unwrap();
        assert_eq!(stats.warnings.len(), 0);
        let back = denormalize(&n);
        for (a, b) in ds.sequences.iter().zip(&back.sequences) {
            for (x, y) in a.inputs.iter().zip(&b.inputs) {
                assert!((x - y).amax() < 1e-12);
            }
        }
        let mut flat = toy(2);
        for s in &mut flat.sequences {
            for y in &mut s.outputs {
                y[0] = 3.0;
            }
        }
        let n = normalize(&flat).unwrap();
        assert_eq!(n.normalization.as_ref().unwrap().warnings.len(), 1);
        assert!(n.sequences.iter().all(|s| s.outputs.iter().all(|y| y[0].is_finite())));
    }

    #[test]
    fn normalization_ignores_test_sequences() {
        let mut ds = toy(4);
        ds.sequences[3].split = Split::Test;
        let before = normalize(&ds).unwrap().normalization;
        for y in &mut ds.sequences[3].outputs {
            y[0] += 1000.0;
        }
        assert_eq!(before, normalize(&ds).unwrap().normalization);
        ds.sequences.iter_mut().for_each(|s| s.split = Split::Test);
        assert!(normalize(&ds).is_err());
    }

    #[test]
    fn standardized_data_is_unchanged() {
        let mut ds = toy(1);
        let vals = [-1.0, 1.0, -1.0, 1.0, 0.0];
        let m = vals.iter().sum::<f64>() / 5.0;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 5.0).sqrt();
        for (k, y) in ds.sequences[0].outputs.iter_mut().enumerate() {
            y[0] = (vals[k] - m) / sd;
        }
        let n = normalize(&ds).unwrap();
        let st = n.normalization.as_ref().unwrap();
        assert!(st.output_mean[0].abs() < 1e-12 && (st.output_scale[0] - 1.0).abs() < 1e-12);
        for (a, b) in ds.sequences[0].outputs.iter().zip(&n.sequences[0].outputs) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn stored_statistics_reapply() {
        let ds = toy(3);
        let n = normalize(&ds).unwrap();
        let again = apply_normalization(&ds, n.normalization.as_ref().unwrap()).unwrap();
        assert_eq!(again.sequences, n.sequences);
        assert!(apply_normalization(&n, n.normalization.as_ref().unwrap()).is_err());
    }
}
