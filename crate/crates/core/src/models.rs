//! Quadratic two-layer networks.
//!
//! The classifier has a fixed ±1 second layer:
//! `F_j(W, x) = (1/m) Σ_r (⟨w_{j,r}, x1⟩² + ⟨w_{j,r}, x2⟩²)` and `f = F₊ − F₋`.
//! The denoiser shares its two layers and acts patch-wise:
//! `f_p(W, x) = (1/√m) Σ_r ⟨w_r, x_p⟩² w_r`.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{gaussian_mat, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// A parameter structure made of one or more `m × d` weight blocks.
///
/// Gradients are returned in the same structure as the parameters they
/// differentiate, so training is `params.axpy(-eta, &grad)`.
pub trait ParamSet: Clone + Send + Sync {
    fn blocks(&self) -> Vec<&Array2<f64>>;
    fn blocks_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    /// `self += a · other`.
    fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.blocks_mut().into_iter().zip(other.blocks()) {
            x.scaled_add(a, y);
        }
    }

    /// Scaled by the largest entry so tiny gradients do not underflow to 0.
    fn frobenius_norm(&self) -> f64 {
        let blocks = self.blocks();
        let big = blocks.iter().flat_map(|b| b.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
        if big == 0.0 || !big.is_finite() {
            return big;
        }
        let sum: f64 = blocks.iter().flat_map(|b| b.iter()).map(|v| (v / big) * (v / big)).sum();
        big * sum.sqrt()
    }

    fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn num_coords(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Flat coordinate access in block-major, row-major order.
    fn coord(&self, k: usize) -> f64 {
        let (b, i) = locate(self.blocks().iter().map(|b| b.len()), k);
        self.blocks()[b].as_slice().expect("standard layout")[i]
    }

    fn coord_mut(&mut self, k: usize) -> &mut f64 {
        let (b, i) = locate(self.blocks().iter().map(|b| b.len()), k);
        let blk = self.blocks_mut().swap_remove(b);
        &mut blk.as_slice_mut().expect("standard layout")[i]
    }
}

fn locate(lens: impl Iterator<Item = usize>, mut k: usize) -> (usize, usize) {
    for (b, len) in lens.enumerate() {
        if k < len {
            return (b, k);
        }
        k -= len;
    }
    panic!("coordinate index out of range");
}

/// Gradient with respect to a parameter structure; same shape as `P`.
pub type GradBundle<P> = P;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w_pos: Array2<f64>,
    pub w_neg: Array2<f64>,
}

impl ClassifierParams {
    pub fn new(w_pos: Array2<f64>, w_neg: Array2<f64>) -> Result<Self> {
        if w_pos.dim() != w_neg.dim() {
            return Err(Error::shape(format!("{:?}", w_pos.dim()), format!("{:?}", w_neg.dim())));
        }
        Ok(ClassifierParams { w_pos, w_neg })
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        ClassifierParams {
            w_pos: Array2::zeros((m, d)),
            w_neg: Array2::zeros((m, d)),
        }
    }

    pub fn m(&self) -> usize {
        self.w_pos.nrows()
    }

    pub fn d(&self) -> usize {
        self.w_pos.ncols()
    }

    /// The weight block for class `j ∈ {−1, +1}`.
    pub fn block(&self, j: f64) -> &Array2<f64> {
        if j > 0.0 {
            &self.w_pos
        } else {
            &self.w_neg
        }
    }
}

impl ParamSet for ClassifierParams {
    fn blocks(&self) -> Vec<&Array2<f64>> {
        vec![&self.w_pos, &self.w_neg]
    }
    fn blocks_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w_pos, &mut self.w_neg]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub w: Array2<f64>,
}

impl DenoiserParams {
    pub fn new(w: Array2<f64>) -> Self {
        DenoiserParams { w }
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        DenoiserParams { w: Array2::zeros((m, d)) }
    }

    pub fn m(&self) -> usize {
        self.w.nrows()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }
}

impl ParamSet for DenoiserParams {
    fn blocks(&self) -> Vec<&Array2<f64>> {
        vec![&self.w]
    }
    fn blocks_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub sigma0: f64,
    #[serde(default)]
    pub seed: u64,
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::config(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        Ok(())
    }
}

/// `m × d` matrix of i.i.d. `N(0, σ₀²)` entries from the `Init` stream.
pub fn init_gaussian(m: usize, d: usize, init: &InitConfig) -> Result<Array2<f64>> {
    init.validate()?;
    if m == 0 || d == 0 {
        return Err(Error::config(format!("init needs m, d >= 1, got m={m}, d={d}")));
    }
    Ok(gaussian_mat(m, d, init.sigma0, &mut rng::stream(init.seed, Stream::Init)))
}

/// Both classifier blocks, drawn consecutively (`w_pos` then `w_neg`).
pub fn init_classifier(m: usize, d: usize, init: &InitConfig) -> Result<ClassifierParams> {
    init.validate()?;
    if m == 0 || d == 0 {
        return Err(Error::config(format!("init needs m, d >= 1, got m={m}, d={d}")));
    }
    let mut r = rng::stream(init.seed, Stream::Init);
    let w_pos = gaussian_mat(m, d, init.sigma0, &mut r);
    let w_neg = gaussian_mat(m, d, init.sigma0, &mut r);
    Ok(ClassifierParams { w_pos, w_neg })
}

pub fn init_denoiser(m: usize, d: usize, init: &InitConfig) -> Result<DenoiserParams> {
    Ok(DenoiserParams::new(init_gaussian(m, d, init)?))
}

fn check_dim(w: &Array2<f64>, x: &ArrayView1<f64>) -> Result<()> {
    if w.ncols() != x.len() {
        return Err(Error::shape(w.ncols(), x.len()));
    }
    Ok(())
}

/// `F_j` for one block.
pub fn class_score(w: &Array2<f64>, x1: ArrayView1<f64>, x2: ArrayView1<f64>) -> f64 {
    let a1 = w.dot(&x1);
    let a2 = w.dot(&x2);
    (a1.dot(&a1) + a2.dot(&a2)) / w.nrows() as f64
}

/// `(F₊, F₋, F₊ − F₋)`.
pub fn classifier_forward(params: &ClassifierParams, sample: &Sample<'_>) -> Result<(f64, f64, f64)> {
    check_dim(&params.w_pos, &sample.x1)?;
    check_dim(&params.w_pos, &sample.x2)?;
    let fp = class_score(&params.w_pos, sample.x1, sample.x2);
    let fn_ = class_score(&params.w_neg, sample.x1, sample.x2);
    Ok((fp, fn_, fp - fn_))
}

/// Margins-free outputs `f(W, x_i)` for a whole stack of samples given as
/// `n × d` signal and noise matrices.
pub fn classifier_outputs(params: &ClassifierParams, x1: ArrayView2<f64>, x2: ArrayView2<f64>) -> Array1<f64> {
    let m = params.m() as f64;
    let score = |w: &Array2<f64>| {
        let a1 = x1.dot(&w.t());
        let a2 = x2.dot(&w.t());
        let mut s = Array1::zeros(x1.nrows());
        Zip::from(&mut s)
            .and(a1.rows())
            .and(a2.rows())
            .for_each(|s, r1, r2| *s = (r1.dot(&r1) + r2.dot(&r2)) / m);
        s
    };
    score(&params.w_pos) - score(&params.w_neg)
}

/// One patch through the denoiser.
pub fn denoise_patch(w: &Array2<f64>, x: ArrayView1<f64>) -> Array1<f64> {
    let a = w.dot(&x);
    let a2 = a.mapv(|v| v * v) / (w.nrows() as f64).sqrt();
    w.t().dot(&a2)
}

pub fn denoiser_forward(
    params: &DenoiserParams,
    x1: ArrayView1<f64>,
    x2: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_dim(&params.w, &x1)?;
    check_dim(&params.w, &x2)?;
    Ok((denoise_patch(&params.w, x1), denoise_patch(&params.w, x2)))
}

/// Denoiser outputs for a stack of patches (`P × d` in, `P × d` out).
pub fn denoise_batch(w: &Array2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let a = x.dot(&w.t());
    let a2 = a.mapv(|v| v * v) / (w.nrows() as f64).sqrt();
    a2.dot(w)
}

/// Metadata stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub m: usize,
    pub d: usize,
    pub sigma0: f64,
    pub seed: u64,
    pub iteration: usize,
}

/// Write parameters as CSV: `#`-prefixed header lines with the metadata and
/// block names, then one row per neuron.
pub fn write_checkpoint<P: ParamSet>(path: &Path, params: &P, meta: &CheckpointMeta) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let blocks = params.blocks();
    writeln!(
        w,
        "# m={},d={},sigma0={:e},seed={},iteration={},blocks={}",
        meta.m,
        meta.d,
        meta.sigma0,
        meta.seed,
        meta.iteration,
        blocks.len()
    )
    .map_err(io)?;
    for b in blocks {
        for row in b.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a checkpoint written by [`write_checkpoint`]. Returns the metadata and
/// the weight blocks in order.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<Array2<f64>>)> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::open(path).map_err(io)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty checkpoint".into()))?
        .map_err(io)?;
    let header = header
        .strip_prefix("# ")
        .ok_or_else(|| Error::Format("missing checkpoint header".into()))?;
    let mut kv = std::collections::HashMap::new();
    for part in header.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {part:?}")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("checkpoint header lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad {k} in checkpoint header")))
    };
    let meta = CheckpointMeta {
        m: num("m")?,
        d: num("d")?,
        sigma0: get("sigma0")?
            .parse()
            .map_err(|_| Error::Format("bad sigma0 in checkpoint header".into()))?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Format("bad seed in checkpoint header".into()))?,
        iteration: num("iteration")?,
    };
    let n_blocks = num("blocks")?;
    let mut values = Vec::with_capacity(n_blocks * meta.m * meta.d);
    for line in lines {
        let line = line.map_err(io)?;
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("non-numeric checkpoint entry".into()))?;
        if row.len() != meta.d {
            return Err(Error::shape(meta.d, row.len()));
        }
        values.extend(row);
    }
    if values.len() != n_blocks * meta.m * meta.d {
        return Err(Error::shape(n_blocks * meta.m * meta.d, values.len()));
    }
    let blocks = values
        .chunks(meta.m * meta.d)
        .map(|c| Array2::from_shape_vec((meta.m, meta.d), c.to_vec()).expect("chunk size"))
        .collect();
    Ok((meta, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample<'a>(x1: &'a Array1<f64>, x2: &'a Array1<f64>) -> Sample<'a> {
        Sample {
            x1: x1.view(),
            x2: x2.view(),
            label: 1.0,
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let p = ClassifierParams::zeros(3, 4);
        let x = array![1.0, 2.0, 3.0, 4.0];
        assert_eq!(classifier_forward(&p, &sample(&x, &x)).unwrap(), (0.0, 0.0, 0.0));
        let (o1, o2) = denoiser_forward(&DenoiserParams::zeros(3, 4), x.view(), x.view()).unwrap();
        assert!(o1.iter().chain(o2.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_neuron_classifier_is_fourth_power() {
        let x1 = array![1.0, -2.0, 0.5];
        let x2 = Array1::zeros(3);
        let p = ClassifierParams::new(x1.clone().insert_axis(ndarray::Axis(0)), Array2::zeros((1, 3))).unwrap();
        let (_, _, f) = classifier_forward(&p, &sample(&x1, &x2)).unwrap();
        let sq = x1.dot(&x1);
        assert!((f - sq * sq).abs() < 1e-12);
    }

    #[test]
    fn single_neuron_denoiser_identity() {
        let e1 = array![1.0, 0.0, 0.0];
        let p = DenoiserParams::new(e1.clone().insert_axis(ndarray::Axis(0)));
        let (o1, _) = denoiser_forward(&p, e1.view(), e1.view()).unwrap();
        assert_eq!(o1, e1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = ClassifierParams::zeros(2, 3);
        let x = array![1.0, 2.0];
        assert!(classifier_forward(&p, &sample(&x, &x)).is_err());
        assert!(denoiser_forward(&DenoiserParams::zeros(2, 3), x.view(), x.view()).is_err());
        assert!(ClassifierParams::new(Array2::zeros((2, 3)), Array2::zeros((3, 3))).is_err());
    }

    #[test]
    fn init_statistics_and_determinism() {
        let init = InitConfig { sigma0: 0.001, seed: 5 };
        let a = init_gaussian(20, 1000, &init).unwrap();
        let b = init_gaussian(20, 1000, &init).unwrap();
        assert_eq!(a, b);
        let mean = a.mean().unwrap();
        assert!(mean.abs() <= 5.0 * 0.001 / (20_000f64).sqrt());
        let sd = (a.mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!((sd / 0.001 - 1.0).abs() < 0.03);

        let mn = init_gaussian(100, 1568, &InitConfig { sigma0: 0.01, seed: 0 }).unwrap();
        assert_eq!(mn.dim(), (100, 1568));
        assert!(init_gaussian(0, 3, &init).is_err());
        assert!(init_gaussian(2, 3, &InitConfig { sigma0: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn flat_coordinates_span_all_blocks() {
        let mut p = ClassifierParams::zeros(2, 3);
        assert_eq!(p.num_coords(), 12);
        *p.coord_mut(7) = 4.0;
        assert_eq!(p.w_neg[[0, 1]], 4.0);
        assert_eq!(p.coord(7), 4.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let init = InitConfig { sigma0: 0.1, seed: 2 };
        let p = init_classifier(3, 5, &init).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.csv");
        let meta = CheckpointMeta {
            m: 3,
            d: 5,
            sigma0: 0.1,
            seed: 2,
            iteration: 17,
        };
        write_checkpoint(&path, &p, &meta).unwrap();
        let (m2, blocks) = read_checkpoint(&path).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(blocks, vec![p.w_pos.clone(), p.w_neg.clone()]);
    }
}
