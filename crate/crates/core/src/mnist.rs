//! MNIST ingestion and the Noisy-MNIST two-patch dataset.
//!
//! IDX files are read uncompressed; gzip the user has to undo first.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{gaussian_mat, DataSource, Dataset, Sample};
use crate::error::{Error, Result};
use crate::models::{classifier_outputs, denoise_patch, ClassifierParams, DenoiserParams};
use crate::objectives::schedule::NoiseSchedule;
use crate::rng::{self, Rng, Stream};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

/// An unsigned-byte IDX tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(expected, data.len()));
        }
        if dims.len() != 1 && dims.len() != 3 {
            return Err(Error::Format(format!("IDX tensors here have 1 or 3 dims, got {}", dims.len())));
        }
        Ok(IdxTensor { dims, data })
    }

    /// Image `i` of a 3-dim tensor, flattened.
    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.dims[1..].iter().product::<usize>();
        &self.data[i * sz..(i + 1) * sz]
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = be_u32(bytes);
    let ndims = match magic {
        MAGIC_IMAGES => 3,
        MAGIC_LABELS => 1,
        _ => return Err(Error::Format(format!("bad IDX magic 0x{magic:08x}"))),
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims).map(|k| be_u32(&bytes[4 + 4 * k..]) as usize).collect();
    let payload: usize = dims.iter().product();
    let total = header + payload;
    if bytes.len() != total {
        return Err(Error::Truncated {
            expected: total,
            actual: bytes.len(),
        });
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn serialize_idx(t: &IdxTensor) -> Vec<u8> {
    let magic = if t.dims.len() == 3 { MAGIC_IMAGES } else { MAGIC_LABELS };
    let mut out = Vec::with_capacity(4 + 4 * t.dims.len() + t.data.len());
    out.extend(magic.to_be_bytes());
    for &d in &t.dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend(&t.data);
    out
}

pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Images and labels of one split.
#[derive(Debug, Clone)]
pub struct MnistSplit {
    pub images: IdxTensor,
    pub labels: IdxTensor,
}

fn find_file(dir: &Path, stem: &str, kind: &str) -> Result<PathBuf> {
    for name in [format!("{stem}-{kind}"), format!("{stem}.{kind}")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::config(format!(
        "no {stem}-{kind} file in {}; supply uncompressed MNIST IDX files",
        dir.display()
    )))
}

/// Load `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from a directory.
pub fn load_split(dir: &Path, train: bool) -> Result<MnistSplit> {
    let prefix = if train { "train" } else { "t10k" };
    let images = read_idx_file(&find_file(dir, &format!("{prefix}-images"), "idx3-ubyte")?)?;
    let labels = read_idx_file(&find_file(dir, &format!("{prefix}-labels"), "idx1-ubyte")?)?;
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(Error::Format(format!(
            "image/label files disagree: {:?} vs {:?}",
            images.dims, labels.dims
        )));
    }
    Ok(MnistSplit { images, labels })
}

/// How raw pixels `p ∈ [0, 255]` become the signal patch before the `SNR~` scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelScaling {
    /// `(p/255 − 0.1307) / 0.3081`, the usual MNIST standardisation.
    #[default]
    Standardized,
    /// `p / 255`.
    UnitInterval,
}

impl PixelScaling {
    pub fn apply(self, p: u8) -> f64 {
        let v = p as f64 / 255.0;
        match self {
            PixelScaling::Standardized => (v - 0.1307) / 0.3081,
            PixelScaling::UnitInterval => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyMnistConfig {
    pub snr_tilde: f64,
    /// The first digit is labelled +1, the second −1.
    pub classes: (u8, u8),
    pub per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scaling: PixelScaling,
    /// Test samples per class; `None` takes all of them.
    #[serde(default)]
    pub test_per_class: Option<usize>,
}

impl NoisyMnistConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_tilde > 0.0 && self.snr_tilde.is_finite()) {
            return Err(Error::config(format!("snr_tilde must be positive, got {}", self.snr_tilde)));
        }
        let (a, b) = self.classes;
        if a > 9 || b > 9 || a == b {
            return Err(Error::config(format!("classes must be distinct digits, got ({a}, {b})")));
        }
        if self.per_class == 0 {
            return Err(Error::config("per_class must be >= 1"));
        }
        Ok(())
    }
}

fn select(labels: &IdxTensor, digit: u8, k: Option<usize>) -> Vec<usize> {
    let it = labels.data.iter().enumerate().filter(|(_, &l)| l == digit).map(|(i, _)| i);
    match k {
        Some(k) => it.take(k).collect(),
        None => it.collect(),
    }
}

fn build(split: &MnistSplit, cfg: &NoisyMnistConfig, per_class: Option<usize>, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    let (pos, neg) = cfg.classes;
    let idx_pos = select(&split.labels, pos, per_class);
    let idx_neg = select(&split.labels, neg, per_class);
    if let Some(k) = per_class {
        for (digit, got) in [(pos, idx_pos.len()), (neg, idx_neg.len())] {
            if got < k {
                return Err(Error::config(format!("digit {digit}: need {k} samples, found {got}")));
            }
        }
    }
    let d = split.images.dims[1..].iter().product::<usize>();
    let chosen: Vec<(usize, f64)> = idx_pos
        .iter()
        .map(|&i| (i, 1.0))
        .chain(idx_neg.iter().map(|&i| (i, -1.0)))
        .collect();
    let n = chosen.len();
    if n == 0 {
        return Err(Error::config("no samples of the requested classes"));
    }
    let mut x1 = Array2::zeros((n, d));
    for (mut row, &(i, _)) in x1.rows_mut().into_iter().zip(&chosen) {
        for (v, &p) in row.iter_mut().zip(split.images.image(i)) {
            *v = cfg.snr_tilde * cfg.scaling.apply(p);
        }
    }
    let x2 = gaussian_mat(n, d, 1.0, rng);
    let labels = Array1::from_iter(chosen.iter().map(|&(_, y)| y));
    let mut source = cfg.clone();
    source.per_class = per_class.unwrap_or(n / 2);
    Dataset::from_parts(x1, x2, labels, None, DataSource::NoisyMnist(source))
}

/// Training set: the first `per_class` images of each class in file order,
/// positive class first, with `N(0, I)` noise patches from the `Mnist` stream.
pub fn build_noisy_mnist(split: &MnistSplit, cfg: &NoisyMnistConfig) -> Result<Dataset> {
    build(split, cfg, Some(cfg.per_class), &mut rng::stream(cfg.seed, Stream::Mnist))
}

/// Test set from a held-out split, noise from the `Test` stream.
pub fn build_noisy_mnist_test(split: &MnistSplit, cfg: &NoisyMnistConfig) -> Result<Dataset> {
    build(split, cfg, cfg.test_per_class, &mut rng::stream(cfg.seed, Stream::Test))
}

/// `∇_x F_y(W, x)` for the sample's own class: per patch
/// `(2/m) Σ_r ⟨w_{y,r}, x_p⟩ w_{y,r}`, concatenated (signal patch first).
pub fn input_gradient_map(params: &ClassifierParams, sample: &Sample<'_>) -> Array1<f64> {
    let w = params.block(sample.label);
    let scale = 2.0 / params.m() as f64;
    let g1 = w.t().dot(&w.dot(&sample.x1)) * scale;
    let g2 = w.t().dot(&w.dot(&sample.x2)) * scale;
    ndarray::concatenate(Axis(0), &[g1.view(), g2.view()]).expect("same width")
}

/// `(x_t − β ε̂(x_t)) / α` with `x_t = αx₀ + βε`, for a given noise draw and
/// an arbitrary noise predictor acting on the concatenated input.
pub fn reconstruct_with(
    predict: impl Fn(ArrayView1<f64>) -> Array1<f64>,
    x0: ArrayView1<f64>,
    eps: ArrayView1<f64>,
    sched: &NoiseSchedule,
) -> Array1<f64> {
    let xt = &x0 * sched.alpha + &eps * sched.beta;
    let pred = predict(xt.view());
    (xt - pred * sched.beta) / sched.alpha
}

/// Denoiser prediction on a concatenated two-patch input.
pub fn denoiser_predict(params: &DenoiserParams, x: ArrayView1<f64>) -> Array1<f64> {
    let d = params.d();
    let o1 = denoise_patch(&params.w, x.slice(s![..d]));
    let o2 = denoise_patch(&params.w, x.slice(s![d..]));
    ndarray::concatenate(Axis(0), &[o1.view(), o2.view()]).expect("same width")
}

/// Draw `ε ~ N(0, I)` for both patches and reconstruct `x₀`.
pub fn denoise_reconstruct(
    params: &DenoiserParams,
    x0: ArrayView1<f64>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Array1<f64>> {
    if x0.len() != 2 * params.d() {
        return Err(Error::shape(2 * params.d(), x0.len()));
    }
    if sched.alpha.is_nan() || sched.alpha <= 0.0 {
        return Err(Error::config("alpha must be positive"));
    }
    let eps = crate::data::gaussian_vec(x0.len(), 1.0, rng);
    Ok(reconstruct_with(|x| denoiser_predict(params, x), x0, eps.view(), sched))
}

/// Fraction of samples with `sign(f) = y`, where `sign(0) = +1`.
pub fn accuracy(params: &ClassifierParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    if params.d() != ds.d() {
        return Err(Error::shape(ds.d(), params.d()));
    }
    let f = classifier_outputs(params, ds.x1(), ds.x2());
    let hits = f
        .iter()
        .zip(ds.labels())
        .filter(|(&f, &y)| (if f >= 0.0 { 1.0 } else { -1.0 }) == y)
        .count();
    Ok(hits as f64 / ds.n() as f64)
}

/// Energy split `(‖signal half‖², ‖noise half‖²)` of a concatenated vector.
pub fn patch_energy(v: ArrayView1<f64>) -> (f64, f64) {
    let h = v.len() / 2;
    let a = v.slice(s![..h]);
    let b = v.slice(s![h..]);
    (a.dot(&a), b.dot(&b))
}

/// Write rows of a matrix as CSV with a `c0..c{k}` header.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..m.ncols()).map(|k| format!("c{k}")))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
