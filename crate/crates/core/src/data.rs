//! Two-patch synthetic data.
//!
//! Each sample is `(x1, x2, y)` with `x1 = μ_y` and `x2 = ξ` drawn from a
//! Gaussian restricted to the orthogonal complement of `span{μ₁, μ₋₁}`.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mnist::NoisyMnistConfig;
use crate::rng::{self, Rng, Stream};

/// How the two signal vectors are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// `μ₁ = ‖μ‖·e₁`, `μ₋₁ = ‖μ‖·e₂`.
    #[default]
    AxisAligned,
    /// A random orthogonal pair drawn from the `Signals` stream.
    RandomOrthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub d: usize,
    pub n: usize,
    pub mu_norm: f64,
    pub sigma_xi: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub signal_mode: SignalMode,
}

impl SyntheticConfig {
    pub fn new(d: usize, n: usize, mu_norm: f64, sigma_xi: f64, seed: u64) -> Self {
        SyntheticConfig {
            d,
            n,
            mu_norm,
            sigma_xi,
            seed,
            signal_mode: SignalMode::AxisAligned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return Err(Error::config(format!("d must be >= 3, got {}", self.d)));
        }
        if self.n < 1 {
            return Err(Error::config("n must be >= 1"));
        }
        if !(self.mu_norm > 0.0 && self.mu_norm.is_finite()) {
            return Err(Error::config(format!("mu_norm must be positive, got {}", self.mu_norm)));
        }
        if !(self.sigma_xi > 0.0 && self.sigma_xi.is_finite()) {
            return Err(Error::config(format!("sigma_xi must be positive, got {}", self.sigma_xi)));
        }
        Ok(())
    }

    /// Parse a `key = value` configuration file.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SyntheticConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalPair {
    pub mu_pos: Array1<f64>,
    pub mu_neg: Array1<f64>,
}

impl SignalPair {
    pub fn dim(&self) -> usize {
        self.mu_pos.len()
    }

    /// `μ_y` for a label `y ∈ {−1, +1}`.
    pub fn for_label(&self, y: f64) -> &Array1<f64> {
        if y > 0.0 {
            &self.mu_pos
        } else {
            &self.mu_neg
        }
    }

    /// Remove the components of `v` along both signals.
    pub fn project_out(&self, mut v: Array1<f64>) -> Array1<f64> {
        for mu in [&self.mu_pos, &self.mu_neg] {
            let c = v.dot(mu) / mu.dot(mu);
            v.scaled_add(-c, mu);
        }
        v
    }
}

pub fn make_signals(d: usize, mu_norm: f64) -> Result<SignalPair> {
    if d < 2 {
        return Err(Error::config(format!("signals need d >= 2, got {d}")));
    }
    let mut mu_pos = Array1::zeros(d);
    let mut mu_neg = Array1::zeros(d);
    mu_pos[0] = mu_norm;
    mu_neg[1] = mu_norm;
    Ok(SignalPair { mu_pos, mu_neg })
}

/// Two orthogonal vectors of norm `mu_norm` in a random direction (Gram-Schmidt
/// on Gaussian draws, with a second re-orthogonalisation pass).
pub fn make_random_signals(d: usize, mu_norm: f64, rng: &mut Rng) -> Result<SignalPair> {
    if d < 2 {
        return Err(Error::config(format!("signals need d >= 2, got {d}")));
    }
    let a = gaussian_vec(d, 1.0, rng);
    let a = &a / a.dot(&a).sqrt();
    let mut b = gaussian_vec(d, 1.0, rng);
    for _ in 0..2 {
        let c = b.dot(&a);
        b.scaled_add(-c, &a);
    }
    let b = &b / b.dot(&b).sqrt();
    Ok(SignalPair {
        mu_pos: a * mu_norm,
        mu_neg: b * mu_norm,
    })
}

pub(crate) fn gaussian_vec(d: usize, sigma: f64, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || sigma * rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn gaussian_mat(rows: usize, cols: usize, sigma: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || sigma * rng.sample::<f64, _>(StandardNormal))
}

pub fn sample_noise(signals: &SignalPair, sigma_xi: f64, rng: &mut Rng) -> Array1<f64> {
    signals.project_out(gaussian_vec(signals.dim(), sigma_xi, rng))
}

/// One sample, borrowed from a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x1: ArrayView1<'a, f64>,
    pub x2: ArrayView1<'a, f64>,
    pub label: f64,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    NoisyMnist(NoisyMnistConfig),
}

/// An immutable two-patch dataset.
///
/// Patches are stored stacked in a `2n × d` matrix: rows `0..n` hold the
/// signal patches, rows `n..2n` the noise patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    patches: Array2<f64>,
    labels: Array1<f64>,
    signals: Option<SignalPair>,
    source: DataSource,
}

impl Dataset {
    /// Assemble a dataset from its parts. Labels must be ±1.
    pub fn from_parts(
        x1: Array2<f64>,
        x2: Array2<f64>,
        labels: Array1<f64>,
        signals: Option<SignalPair>,
        source: DataSource,
    ) -> Result<Self> {
        if x1.dim() != x2.dim() {
            return Err(Error::shape(format!("{:?}", x1.dim()), format!("{:?}", x2.dim())));
        }
        if labels.len() != x1.nrows() {
            return Err(Error::shape(x1.nrows(), labels.len()));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::config("labels must be +1 or -1"));
        }
        if let Some(sig) = &signals {
            if sig.dim() != x1.ncols() {
                return Err(Error::shape(x1.ncols(), sig.dim()));
            }
        }
        let patches = ndarray::concatenate(Axis(0), &[x1.view(), x2.view()])
            .expect("row concatenation of equal-width matrices");
        Ok(Dataset {
            patches,
            labels,
            signals,
            source,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.patches.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// All `2n` patches, signal patches first.
    pub fn patches(&self) -> ArrayView2<'_, f64> {
        self.patches.view()
    }

    pub fn x1(&self) -> ArrayView2<'_, f64> {
        self.patches.slice(s![..self.n(), ..])
    }

    pub fn x2(&self) -> ArrayView2<'_, f64> {
        self.patches.slice(s![self.n().., ..])
    }

    pub fn labels(&self) -> &Array1<f64> {
        &self.labels
    }

    pub fn signals(&self) -> Option<&SignalPair> {
        self.signals.as_ref()
    }

    pub fn source(&self) -> &DataSource {
        &self.source
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        let n = self.n();
        Sample {
            x1: self.patches.row(i),
            x2: self.patches.row(n + i),
            label: self.labels[i],
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample<'_>> + '_ {
        (0..self.n()).map(move |i| self.sample(i))
    }

    /// Write one row per sample: label, then x1 entries, then x2 entries.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let d = self.d();
        let mut header = vec!["label".to_string()];
        header.extend((0..d).map(|k| format!("x1_{k}")));
        header.extend((0..d).map(|k| format!("x2_{k}")));
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for s in self.samples() {
            write!(w, "{}", s.label).map_err(io)?;
            for v in s.x1.iter().chain(s.x2.iter()) {
                write!(w, ",{v:e}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn rademacher(n: usize, rng: &mut Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || if rng.random::<bool>() { 1.0 } else { -1.0 })
}

fn signals_for(cfg: &SyntheticConfig) -> Result<SignalPair> {
    match cfg.signal_mode {
        SignalMode::AxisAligned => make_signals(cfg.d, cfg.mu_norm),
        SignalMode::RandomOrthogonal => {
            make_random_signals(cfg.d, cfg.mu_norm, &mut rng::stream(cfg.seed, Stream::Signals))
        }
    }
}

fn draw(cfg: &SyntheticConfig, n: usize, signals: SignalPair, rng: &mut Rng) -> Result<Dataset> {
    // Labels first, so the noise stream does not depend on them.
    let labels = rademacher(n, rng);
    let mut x2 = Array2::zeros((n, cfg.d));
    for mut row in x2.rows_mut() {
        row.assign(&sample_noise(&signals, cfg.sigma_xi, rng));
    }
    let mut x1 = Array2::zeros((n, cfg.d));
    for (mut row, &y) in x1.rows_mut().into_iter().zip(labels.iter()) {
        row.assign(signals.for_label(y));
    }
    let mut source_cfg = cfg.clone();
    source_cfg.n = n;
    Dataset::from_parts(x1, x2, labels, Some(signals), DataSource::Synthetic(source_cfg))
}

pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let signals = signals_for(cfg)?;
    draw(cfg, cfg.n, signals, &mut rng::stream(cfg.seed, Stream::Data))
}

/// Fresh samples from the same distribution (same signals), drawn from an
/// independent stream.
pub fn generate_test_set(cfg: &SyntheticConfig, n_test: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n_test == 0 {
        return Err(Error::config("test set size must be >= 1"));
    }
    let signals = signals_for(cfg)?;
    draw(cfg, n_test, signals, &mut rng::stream(cfg.seed, Stream::Test))
}

/// `(SNR, n·SNR²)` with `SNR = ‖μ‖ / (σ_ξ √d)`.
pub fn snr_quantities(cfg: &SyntheticConfig) -> (f64, f64) {
    let snr = cfg.mu_norm / (cfg.sigma_xi * (cfg.d as f64).sqrt());
    (snr, cfg.n as f64 * snr * snr)
}
