//! TOML run configuration. Every section is optional; command-line flags
//! override the file, and the resolved result is written next to the outputs.

use std::path::{Path, PathBuf};

use cirnn::contraction::DEFAULT_MARGIN;
use cirnn::data::{ChenConfig, Split};
use cirnn::init::{InitScheme, Preset};
use cirnn::models::{Activation, LayerDims, ModelKind};
use cirnn::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// `desk`/`full` for `generate`, `A`-`E` for `init` and `train`.
    pub preset: Option<String>,
    pub model: ModelSection,
    pub init: InitSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<ModelKind>,
    pub activation: Activation,
    pub n_x: usize,
    pub layers: usize,
    /// Hidden widths `n₁..n_{L−1}`; defaults to `n_x` everywhere.
    pub hidden: Option<Vec<usize>>,
    /// Used when no dataset is given.
    pub n_u: usize,
    pub n_y: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { kind: None, activation: Activation::Relu, n_x: 20, layers: 2, hidden: None, n_u: 1, n_y: 1 }
    }
}

impl ModelSection {
    pub fn dims(&self, n_u: usize, n_y: usize) -> Result<LayerDims, Failure> {
        let mut widths = vec![self.n_x];
        match &self.hidden {
            Some(h) if h.len() + 1 != self.layers => {
                return Err(Failure::config(format!(
                    "model.hidden lists {} widths but {} layers need {}",
                    h.len(),
                    self.layers,
                    self.layers.saturating_sub(1)
                )))
            }
            Some(h) => widths.extend(h),
            None => widths.extend(std::iter::repeat_n(self.n_x, self.layers.saturating_sub(1))),
        }
        widths.push(self.n_x);
        let dims = LayerDims { n_x: self.n_x, n_u, n_y, widths };
        dims.validate()?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub alpha: Option<f64>,
    pub scheme: Option<InitScheme>,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection { alpha: None, scheme: None, epsilon: DEFAULT_MARGIN, lambda: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Overrides for the synthetic generator.
    pub chen: Option<ChenConfig>,
    pub manifest: Option<PathBuf>,
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { chen: None, manifest: None, normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub washout: usize,
    pub stress_pairs: usize,
    pub stress_horizon: usize,
    pub fold: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { split: Split::Test, washout: 0, stress_pairs: 20, stress_horizon: 1000, fold: None }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, Failure> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn require_seed(&self) -> Result<u64, Failure> {
        self.seed.ok_or_else(|| Failure::config("a seed is required (set `seed` in the config or pass --seed)"))
    }

    pub fn model_preset(&self) -> Result<Option<Preset>, Failure> {
        self.preset.as_deref().map(str::parse::<Preset>).transpose().map_err(Failure::from)
    }

    pub fn chen(&self, seed: u64) -> Result<ChenConfig, Failure> {
        let mut cfg = match self.preset.as_deref() {
            None | Some("desk") => ChenConfig::desk(seed),
            Some("full" | "paper") => ChenConfig::full(seed),
            Some(other) => return Err(Failure::config(format!("unknown data preset '{other}' (expected desk or full)"))),
        };
        if let Some(custom) = &self.data.chen {
            cfg = custom.clone();
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model kind, initialization scheme and spectral scale, with the preset
    /// supplying anything the `[model]` and `[init]` sections leave open.
    pub fn model_choice(&self) -> Result<(ModelKind, InitScheme, f64), Failure> {
        let preset = self.model_preset()?;
        let kind = self.model.kind.or(preset.map(Preset::kind)).unwrap_or(ModelKind::CiRnn);
        let scheme = self
            .init
            .scheme
            .or(preset.filter(|p| p.kind() == kind).map(Preset::scheme))
            .unwrap_or(InitScheme::default_for(kind));
        let alpha = self.init.alpha.or(preset.map(Preset::alpha)).unwrap_or(1.2);
        Ok((kind, scheme, alpha))
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::config(format!("cannot render config: {e}")))
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<(), Failure> {
        std::fs::write(dir.join("config.toml"), self.to_toml()?).map_err(|e| Failure::data(e.to_string()))
    }
}
