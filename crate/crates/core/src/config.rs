//! Experiment and sweep specifications (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::PhaseThresholds;
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::mnist::{NoisyMnistConfig, PixelScaling};
use crate::models::InitConfig;
use crate::trainer::TrainConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "FEATDYN_OUT";
/// Environment variable naming the directory with MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "FEATDYN_MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Diffusion,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Classifier => "classifier",
            ModelKind::Diffusion => "diffusion",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistDataSpec {
    /// Directory with the IDX files; falls back to `FEATDYN_MNIST_DIR`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    pub snr_tilde: f64,
    #[serde(default = "default_classes")]
    pub classes: (u8, u8),
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scaling: PixelScaling,
    #[serde(default)]
    pub test_per_class: Option<usize>,
}

fn default_classes() -> (u8, u8) {
    (1, 0)
}

fn default_per_class() -> usize {
    50
}

impl MnistDataSpec {
    pub fn noisy_config(&self) -> NoisyMnistConfig {
        NoisyMnistConfig {
            snr_tilde: self.snr_tilde,
            classes: self.classes,
            per_class: self.per_class,
            seed: self.seed,
            scaling: self.scaling,
            test_per_class: self.test_per_class,
        }
    }

    /// The configured directory, or the environment fallback.
    pub fn resolve_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.dir {
            return Ok(d.clone());
        }
        std::env::var_os(MNIST_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::config(format!("no MNIST directory: set data.dir or {MNIST_DIR_ENV}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticConfig),
    Mnist(MnistDataSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub t: f64,
    /// Test images reconstructed for the MNIST denoising report.
    #[serde(default = "default_reconstructions")]
    pub reconstructions: usize,
}

fn default_reconstructions() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Fresh samples for synthetic test accuracy.
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default)]
    pub phase: PhaseThresholds,
    /// Test images rendered as input-gradient maps (MNIST classifier).
    #[serde(default = "default_gradient_maps")]
    pub gradient_maps: usize,
}

fn default_test_samples() -> usize {
    3000
}

fn default_gradient_maps() -> usize {
    8
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            test_samples: default_test_samples(),
            phase: PhaseThresholds::default(),
            gradient_maps: default_gradient_maps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelKind,
    /// Network width `m`.
    pub width: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataSpec,
    pub init: InitConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub diffusion: Option<DiffusionSpec>,
    #[serde(default)]
    pub eval: EvalSpec,
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("width must be >= 1"));
        }
        match &self.data {
            DataSpec::Synthetic(c) => c.validate()?,
            DataSpec::Mnist(m) => m.noisy_config().validate()?,
        }
        self.init.validate()?;
        self.train.validate()?;
        match (self.model, &self.diffusion) {
            (ModelKind::Diffusion, None) => {
                return Err(Error::config("diffusion experiments need a [diffusion] section with t"))
            }
            (ModelKind::Diffusion, Some(d)) if d.t.is_nan() || d.t <= 0.0 => {
                return Err(Error::config(format!("diffusion time must be positive, got {}", d.t)))
            }
            (ModelKind::Classifier, _) if self.train.objective != crate::trainer::Objective::Exact => {
                return Err(Error::config("the classifier only supports the exact objective"))
            }
            _ => {}
        }
        if let DataSpec::Synthetic(_) = self.data {
            if self.eval.test_samples == 0 {
                return Err(Error::config("eval.test_samples must be >= 1"));
            }
        }
        Ok(())
    }

    /// Output directory: `output_dir` if set, else `<root>/<name>`.
    pub fn resolve_output(&self, root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.name),
        }
    }

    /// Apply a seed to data, initialisation and the Monte-Carlo stream.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s.data {
            DataSpec::Synthetic(c) => c.seed = seed,
            DataSpec::Mnist(m) => m.seed = seed,
        }
        s.init.seed = seed;
        s.train.mc_seed = seed;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    pub mu_values: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// One base experiment per model; each is run at every `(μ, seed)`.
    pub base: Vec<ExperimentSpec>,
}

impl SweepSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_values.is_empty() || self.seeds.is_empty() || self.base.is_empty() {
            return Err(Error::config("sweep needs non-empty mu_values, seeds and base"));
        }
        if self.mu_values.iter().any(|&m| m.is_nan() || m <= 0.0) {
            return Err(Error::config("mu_values must be positive"));
        }
        for b in &self.base {
            b.validate()?;
            if !matches!(b.data, DataSpec::Synthetic(_)) {
                return Err(Error::config("sweeps vary mu_norm and need synthetic data"));
            }
        }
        Ok(())
    }

    pub fn resolve_output(&self, root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.name),
        }
    }
}
