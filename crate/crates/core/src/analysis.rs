//! Feature-learning observables: signal and noise inner products, weight
//! decomposition, phase labels and growth-shape fits.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{snr_quantities, Dataset, SignalPair, SyntheticConfig};
use crate::error::{Error, Result};
use crate::models::{ClassifierParams, DenoiserParams};

/// Snapshot of the signal/noise observables.
///
/// With a fixed signal pair, `mean_signal` averages `|⟨w, μ_j⟩|` over
/// neurons and both classes and `mean_noise` averages `|⟨w, ξ_i⟩|` over
/// neurons and samples. Classifier neurons are matched to their own class
/// (`w_{j,r}` with `μ_j`, `w_{y_i,r}` with `ξ_i`).
///
/// Without a fixed pair (Noisy-MNIST) the signal of sample `i` is its own
/// clean patch and the means are `(1/n) Σ_i max_r |·|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeatureMetrics {
    pub max_signal_pos: f64,
    pub max_signal_neg: f64,
    pub mean_signal: f64,
    pub max_noise: f64,
    pub mean_noise: f64,
    pub ratio: Option<f64>,
    pub wnorm_min: f64,
    pub wnorm_max: f64,
    pub cross_align_min: Option<f64>,
    pub w0_overlap: Option<f64>,
}

impl FeatureMetrics {
    pub const COLUMNS: [&'static str; 10] = [
        "max_signal_pos",
        "max_signal_neg",
        "mean_signal",
        "max_noise",
        "mean_noise",
        "ratio",
        "wnorm_min",
        "wnorm_max",
        "cross_align_min",
        "w0_overlap",
    ];

    pub fn max_signal(&self) -> f64 {
        self.max_signal_pos.max(self.max_signal_neg)
    }

    /// Column values in [`Self::COLUMNS`] order; undefined entries are `NA`.
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:e}"));
        vec![
            format!("{:e}", self.max_signal_pos),
            format!("{:e}", self.max_signal_neg),
            format!("{:e}", self.mean_signal),
            format!("{:e}", self.max_noise),
            format!("{:e}", self.mean_noise),
            opt(self.ratio),
            format!("{:e}", self.wnorm_min),
            format!("{:e}", self.wnorm_max),
            opt(self.cross_align_min),
            opt(self.w0_overlap),
        ]
    }
}

fn max_of(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(f64::INFINITY, f64::min)
}

/// `(min_r ‖w_r‖², max_r ‖w_r‖²)`.
fn norm_range(blocks: &[&Array2<f64>]) -> (f64, f64) {
    let norms: Vec<f64> = blocks
        .iter()
        .flat_map(|b| b.rows().into_iter().map(|r| r.dot(&r)).collect::<Vec<_>>())
        .collect();
    (min_of(norms.iter().copied()), max_of(norms.iter().copied()))
}

/// `min_{r≠r'} ⟨w_r, w_r'⟩` within each block, over `max ‖w_r‖²`.
fn cross_align(blocks: &[&Array2<f64>], max_norm: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for b in blocks {
        let g = b.dot(&b.t());
        for r in 0..g.nrows() {
            for q in 0..g.ncols() {
                if r != q {
                    best = Some(best.map_or(g[[r, q]], |v: f64| v.min(g[[r, q]])));
                }
            }
        }
    }
    best.map(|v| if max_norm > 0.0 { v / max_norm } else { 0.0 })
}

fn ratio(sig: f64, noise: f64) -> Option<f64> {
    (noise > 0.0).then(|| sig / noise)
}

/// `|x Wᵀ|`, one row per patch.
fn abs_inner(x: ArrayView2<f64>, w: &Array2<f64>) -> Array2<f64> {
    x.dot(&w.t()).mapv(f64::abs)
}

fn mean_row_max(a: &Array2<f64>) -> f64 {
    a.rows().into_iter().map(|r| max_of(r.iter().copied())).sum::<f64>() / a.nrows() as f64
}

/// Rows of the per-sample matrix belonging to class `y`.
fn class_rows<'a>(a: &'a Array2<f64>, labels: &'a Array1<f64>, y: f64) -> impl Iterator<Item = f64> + 'a {
    a.rows()
        .into_iter()
        .zip(labels.iter())
        .filter(move |(_, &l)| l == y)
        .flat_map(|(r, _)| r.to_vec())
}

/// `|⟨w_{y_i,r}, v_i⟩|` for the rows `v_i` of `x` (n × m).
fn label_matched(params: &ClassifierParams, x: ArrayView2<f64>, labels: &Array1<f64>) -> Array2<f64> {
    let pos = abs_inner(x, &params.w_pos);
    let neg = abs_inner(x, &params.w_neg);
    let mut out = pos;
    for (i, &y) in labels.iter().enumerate() {
        if y < 0.0 {
            out.row_mut(i).assign(&neg.row(i));
        }
    }
    out
}

pub fn classifier_metrics(params: &ClassifierParams, ds: &Dataset) -> FeatureMetrics {
    let labels = ds.labels();
    let noise = label_matched(params, ds.x2(), labels);
    let blocks = [&params.w_pos, &params.w_neg];
    let (wnorm_min, wnorm_max) = norm_range(&blocks);
    let cross_align_min = cross_align(&blocks, wnorm_max);
    match ds.signals() {
        Some(sig) => {
            let sp = params.w_pos.dot(&sig.mu_pos).mapv(f64::abs);
            let sn = params.w_neg.dot(&sig.mu_neg).mapv(f64::abs);
            let mean_signal = (sp.sum() + sn.sum()) / (2 * params.m()) as f64;
            let mean_noise = noise.mean().unwrap_or(0.0);
            FeatureMetrics {
                max_signal_pos: max_of(sp.iter().copied()),
                max_signal_neg: max_of(sn.iter().copied()),
                mean_signal,
                max_noise: max_of(noise.iter().copied()),
                mean_noise,
                ratio: ratio(mean_signal, mean_noise),
                wnorm_min,
                wnorm_max,
                cross_align_min,
                w0_overlap: None,
            }
        }
        None => {
            let signal = label_matched(params, ds.x1(), labels);
            per_sample(&signal, &noise, labels, wnorm_min, wnorm_max, cross_align_min, None)
        }
    }
}

fn per_sample(
    signal: &Array2<f64>,
    noise: &Array2<f64>,
    labels: &Array1<f64>,
    wnorm_min: f64,
    wnorm_max: f64,
    cross_align_min: Option<f64>,
    w0_overlap: Option<f64>,
) -> FeatureMetrics {
    let mean_signal = mean_row_max(signal);
    let mean_noise = mean_row_max(noise);
    FeatureMetrics {
        max_signal_pos: max_of(class_rows(signal, labels, 1.0)).max(0.0),
        max_signal_neg: max_of(class_rows(signal, labels, -1.0)).max(0.0),
        mean_signal,
        max_noise: max_of(noise.iter().copied()),
        mean_noise,
        ratio: ratio(mean_signal, mean_noise),
        wnorm_min,
        wnorm_max,
        cross_align_min,
        w0_overlap,
    }
}

/// `max_r |⟨w_r, w_r⁰⟩| / ‖w_r⁰‖²`.
fn w0_overlap(w: &Array2<f64>, w0: &Array2<f64>) -> Option<f64> {
    if w.dim() != w0.dim() {
        return None;
    }
    Some(max_of(
        w.rows()
            .into_iter()
            .zip(w0.rows())
            .map(|(r, r0)| r.dot(&r0).abs() / r0.dot(&r0)),
    ))
}

pub fn denoiser_metrics(params: &DenoiserParams, ds: &Dataset, params0: Option<&DenoiserParams>) -> FeatureMetrics {
    let w = &params.w;
    let noise = abs_inner(ds.x2(), w);
    let blocks = [w];
    let (wnorm_min, wnorm_max) = norm_range(&blocks);
    let cross_align_min = cross_align(&blocks, wnorm_max);
    let overlap = params0.and_then(|p0| w0_overlap(w, &p0.w));
    match ds.signals() {
        Some(sig) => {
            let sp = w.dot(&sig.mu_pos).mapv(f64::abs);
            let sn = w.dot(&sig.mu_neg).mapv(f64::abs);
            let mean_signal = (sp.sum() + sn.sum()) / (2 * params.m()) as f64;
            let mean_noise = noise.mean().unwrap_or(0.0);
            FeatureMetrics {
                max_signal_pos: max_of(sp.iter().copied()),
                max_signal_neg: max_of(sn.iter().copied()),
                mean_signal,
                max_noise: max_of(noise.iter().copied()),
                mean_noise,
                ratio: ratio(mean_signal, mean_noise),
                wnorm_min,
                wnorm_max,
                cross_align_min,
                w0_overlap: overlap,
            }
        }
        None => {
            let signal = abs_inner(ds.x1(), w);
            per_sample(&signal, &noise, ds.labels(), wnorm_min, wnorm_max, cross_align_min, overlap)
        }
    }
}

/// Models whose snapshots can be summarised by [`FeatureMetrics`].
pub trait Observable {
    fn metrics(&self, ds: &Dataset, params0: &Self) -> FeatureMetrics;
}

impl Observable for ClassifierParams {
    fn metrics(&self, ds: &Dataset, _params0: &Self) -> FeatureMetrics {
        classifier_metrics(self, ds)
    }
}

impl Observable for DenoiserParams {
    fn metrics(&self, ds: &Dataset, params0: &Self) -> FeatureMetrics {
        denoiser_metrics(self, ds, Some(params0))
    }
}

/// `max_{j,r,i} |⟨w_{j,r}, ξ_i⟩|` over both classes, not only the label-matched block.
pub fn classifier_max_noise_all(params: &ClassifierParams, ds: &Dataset) -> f64 {
    let x2 = ds.x2();
    max_of(
        abs_inner(x2, &params.w_pos)
            .iter()
            .chain(abs_inner(x2, &params.w_neg).iter())
            .copied(),
    )
}

/// Every signed `⟨w_{j,r}, μ_y⟩`, ordered `(j, y, r)` with `j, y` in `(+1, −1)`.
pub fn classifier_signal_inner(params: &ClassifierParams, signals: &SignalPair) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * params.m());
    for w in [&params.w_pos, &params.w_neg] {
        for mu in [&signals.mu_pos, &signals.mu_neg] {
            out.extend(w.dot(mu).iter().copied());
        }
    }
    out
}

/// Mean of the signed `⟨w_r, ξ_i⟩` over neurons and samples.
pub fn mean_signed_noise(w: &Array2<f64>, ds: &Dataset) -> f64 {
    ds.x2().dot(&w.t()).mean().unwrap_or(0.0)
}

/// Neuron concentration `(signal, noise)`: the largest over classes of
/// `max_r |⟨w_r, μ_j⟩| / min_r |⟨w_r, μ_j⟩|`, and the same over samples for
/// `ξ_i`.
pub fn concentration(w: &Array2<f64>, ds: &Dataset, signals: &SignalPair) -> (f64, f64) {
    let spread = |v: ArrayView1<f64>| {
        let a = v.mapv(f64::abs);
        max_of(a.iter().copied()) / min_of(a.iter().copied())
    };
    let sig = spread(w.dot(&signals.mu_pos).view()).max(spread(w.dot(&signals.mu_neg).view()));
    let inner = ds.x2().dot(&w.t());
    let noise = max_of(inner.rows().into_iter().map(spread));
    (sig, noise)
}

/// Coefficients of `w − w⁰` in `span{μ₁, μ₋₁, ξ₁/‖ξ₁‖², …}` (plus, for
/// [`decompose_weight_with_init`], the initial neurons).
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub zeta_pos: f64,
    pub zeta_neg: f64,
    pub rho: Array1<f64>,
    /// Coefficients on the initial neurons `w⁰_1 … w⁰_m`; empty unless requested.
    pub phi: Array1<f64>,
    pub residual_norm: f64,
    /// `‖w − w⁰‖`, the scale against which the residual is judged.
    pub delta_norm: f64,
}

impl Decomposition {
    pub fn relative_residual(&self) -> f64 {
        if self.delta_norm == 0.0 {
            self.residual_norm
        } else {
            self.residual_norm / self.delta_norm
        }
    }
}

/// Least-squares coefficients of `target` on the rows of `basis` via the
/// diagonally normalised Gram system, Cholesky and two refinement steps.
fn least_squares(basis: &Array2<f64>, target: ArrayView1<f64>) -> Result<Array1<f64>> {
    let k = basis.nrows();
    let gram = basis.dot(&basis.t());
    let scale: Array1<f64> = gram.diag().mapv(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
    if scale.iter().any(|&s| s == 0.0) {
        return Err(Error::Singular("zero basis vector".into()));
    }
    let mut a = gram.clone();
    for i in 0..k {
        for j in 0..k {
            a[[i, j]] *= scale[i] * scale[j];
        }
    }
    let l = cholesky(&a)?;
    let rhs = basis.dot(&target) * &scale;
    let mut y = cholesky_solve(&l, &rhs);
    for _ in 0..2 {
        let r = &rhs - &a.dot(&y);
        y = y + cholesky_solve(&l, &r);
    }
    Ok(y * &scale)
}

fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let k = a.nrows();
    let mut l = Array2::<f64>::zeros((k, k));
    for j in 0..k {
        let mut d = a[[j, j]];
        for p in 0..j {
            d -= l[[j, p]] * l[[j, p]];
        }
        if d <= 1e-13 {
            return Err(Error::Singular(format!(
                "Gram matrix not positive definite at pivot {j} (value {d:e})"
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..k {
            let mut s = a[[i, j]];
            for p in 0..j {
                s -= l[[i, p]] * l[[j, p]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let k = l.nrows();
    let mut y = Array1::<f64>::zeros(k);
    for i in 0..k {
        let s: f64 = (0..i).map(|p| l[[i, p]] * y[p]).sum();
        y[i] = (b[i] - s) / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(k);
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|p| l[[p, i]] * x[p]).sum();
        x[i] = (y[i] - s) / l[[i, i]];
    }
    x
}

fn noise_basis(ds: &Dataset) -> Array2<f64> {
    let mut u = ds.x2().to_owned();
    for mut row in u.rows_mut() {
        let sq = row.dot(&row);
        row /= sq;
    }
    u
}

fn check_row(w_row: ArrayView1<f64>, w0_row: ArrayView1<f64>, ds: &Dataset) -> Result<()> {
    if w_row.len() != ds.d() || w0_row.len() != ds.d() {
        return Err(Error::shape(ds.d(), w_row.len().max(w0_row.len())));
    }
    Ok(())
}

pub fn decompose_weight(
    w_row: ArrayView1<f64>,
    w0_row: ArrayView1<f64>,
    signals: &SignalPair,
    ds: &Dataset,
) -> Result<Decomposition> {
    check_row(w_row, w0_row, ds)?;
    let delta = &w_row - &w0_row;
    let zeta_pos = delta.dot(&signals.mu_pos) / signals.mu_pos.dot(&signals.mu_pos);
    let zeta_neg = delta.dot(&signals.mu_neg) / signals.mu_neg.dot(&signals.mu_neg);
    let mut rest = delta.clone();
    rest.scaled_add(-zeta_pos, &signals.mu_pos);
    rest.scaled_add(-zeta_neg, &signals.mu_neg);
    let u = noise_basis(ds);
    let rho = least_squares(&u, rest.view())?;
    let resid = &rest - &u.t().dot(&rho);
    Ok(Decomposition {
        zeta_pos,
        zeta_neg,
        rho,
        phi: Array1::zeros(0),
        residual_norm: resid.dot(&resid).sqrt(),
        delta_norm: delta.dot(&delta).sqrt(),
    })
}

/// As [`decompose_weight`], with the rows of `w0_all` added to the basis.
pub fn decompose_weight_with_init(
    w_row: ArrayView1<f64>,
    w0_row: ArrayView1<f64>,
    w0_all: &Array2<f64>,
    signals: &SignalPair,
    ds: &Dataset,
) -> Result<Decomposition> {
    check_row(w_row, w0_row, ds)?;
    let delta = &w_row - &w0_row;
    let basis = ndarray::concatenate(
        Axis(0),
        &[
            signals.mu_pos.view().insert_axis(Axis(0)),
            signals.mu_neg.view().insert_axis(Axis(0)),
            noise_basis(ds).view(),
            w0_all.view(),
        ],
    )
    .map_err(|_| Error::shape(ds.d(), w0_all.ncols()))?;
    let coef = least_squares(&basis, delta.view())?;
    let resid = &delta - &basis.t().dot(&coef);
    let n = ds.n();
    Ok(Decomposition {
        zeta_pos: coef[0],
        zeta_neg: coef[1],
        rho: coef.slice(ndarray::s![2..2 + n]).to_owned(),
        phi: coef.slice(ndarray::s![2 + n..]).to_owned(),
        residual_norm: resid.dot(&resid).sqrt(),
        delta_norm: delta.dot(&delta).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    SignalDominant,
    NoiseDominant,
    Balanced,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::SignalDominant => "SignalDominant",
            Phase::NoiseDominant => "NoiseDominant",
            Phase::Balanced => "Balanced",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseThresholds {
    pub signal: f64,
    pub small: f64,
    /// `ratio / (n·SNR²)` window counted as balanced.
    pub balance_lo: f64,
    pub balance_hi: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        PhaseThresholds {
            signal: 1.0,
            small: 0.3,
            balance_lo: 1.0 / 3.0,
            balance_hi: 3.0,
        }
    }
}

/// Label a snapshot. `n_snr2` enables the balanced test; without it only
/// the dominance tests and the fallback apply.
pub fn phase_classify(m: &FeatureMetrics, th: &PhaseThresholds, n_snr2: Option<f64>) -> Phase {
    let sig = m.max_signal();
    let noise = m.max_noise;
    if sig >= th.signal && noise <= th.small {
        return Phase::SignalDominant;
    }
    if noise >= th.signal && sig <= th.small {
        return Phase::NoiseDominant;
    }
    if let (Some(c), Some(r)) = (n_snr2, m.ratio) {
        if r >= th.balance_lo * c && r <= th.balance_hi * c {
            return Phase::Balanced;
        }
    }
    if sig >= noise {
        Phase::SignalDominant
    } else {
        Phase::NoiseDominant
    }
}

/// Dimensional diagnostics for the asymptotic regime assumed by the theory.
/// Polylogarithmic constants are unknown, so the flags compare raw scalings
/// only and never gate execution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    pub snr: f64,
    pub n_snr2: f64,
    pub d_over_n7m5: f64,
    pub sigma0: f64,
    pub sigma0_lower: f64,
    pub sigma0_upper: f64,
    pub eta: f64,
    pub eta_upper: f64,
    pub flags: Vec<String>,
}

pub fn regime_report(cfg: &SyntheticConfig, m: usize, sigma0: f64, eta: f64) -> RegimeReport {
    let (snr, n_snr2) = snr_quantities(cfg);
    let (n, mf, d, sx) = (cfg.n as f64, m as f64, cfg.d as f64, cfg.sigma_xi);
    let d_over_n7m5 = d / (n.powi(7) * mf.powi(5));
    let sigma0_lower = n * n * mf / (sx * d);
    let sigma0_upper = (mf.powf(-1.0 / 6.0) * d.powf(-1.0 / 6.0) * sx.powf(1.0 / 3.0) * n.powf(-1.0 / 3.0))
        .min(mf.powf(-1.0 / 6.0) * d.powf(-7.0 / 12.0) * sx.powf(-1.0 / 3.0) * n.powf(1.0 / 3.0))
        .min(d.powf(-0.75) / sx * n);
    let eta_upper = (n * mf * sigma0 / (sx * d.sqrt())).min(n * mf / (sx * sx * d));
    let mut flags = Vec::new();
    if d_over_n7m5 < 1.0 {
        flags.push(format!("d << n^7 m^5 (d / n^7 m^5 = {d_over_n7m5:.3e}); desk scale is outside the asymptotic regime"));
    }
    if sigma0 < sigma0_lower {
        flags.push(format!("sigma0 = {sigma0:e} below n^2 m / (sigma_xi d) = {sigma0_lower:e}"));
    }
    if sigma0 > sigma0_upper {
        flags.push(format!("sigma0 = {sigma0:e} above the initialisation upper scale {sigma0_upper:e}"));
    }
    if eta > eta_upper {
        flags.push(format!("eta = {eta:e} above the learning-rate scale {eta_upper:e}"));
    }
    let sx_hi = d.powf(-0.25);
    if sx > sx_hi {
        flags.push(format!("sigma_xi = {sx:e} above d^(-1/4) = {sx_hi:e}"));
    }
    RegimeReport {
        snr,
        n_snr2,
        d_over_n7m5,
        sigma0,
        sigma0_lower,
        sigma0_upper,
        eta,
        eta_upper,
        flags,
    }
}

impl fmt::Display for RegimeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "SNR            = {:.6}", self.snr)?;
        writeln!(f, "n*SNR^2        = {:.6}", self.n_snr2)?;
        writeln!(f, "d/(n^7 m^5)    = {:.3e}", self.d_over_n7m5)?;
        writeln!(
            f,
            "sigma0         = {:.3e}  (scales: lower {:.3e}, upper {:.3e})",
            self.sigma0, self.sigma0_lower, self.sigma0_upper
        )?;
        writeln!(f, "eta            = {:.3e}  (scale: upper {:.3e})", self.eta, self.eta_upper)?;
        writeln!(f, "note: polylog constants are unknown; these are raw ratios, not pass/fail bounds")?;
        for fl in &self.flags {
            writeln!(f, "flag: {fl}")?;
        }
        Ok(())
    }
}

/// Ordinary least-squares line through `(x, y)`: `(slope, intercept, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Length of the longest prefix whose loss stays above `(1 − frac)` times the
/// initial loss.
pub fn first_stage_by_loss(losses: &[f64], frac: f64) -> usize {
    let Some(&l0) = losses.first() else { return 0 };
    losses.iter().position(|&l| l <= (1.0 - frac) * l0).unwrap_or(losses.len())
}

/// Length of the longest prefix whose value stays below `factor` times the
/// initial value.
pub fn first_stage_by_growth(values: &[f64], factor: f64) -> usize {
    let Some(&v0) = values.first() else { return 0 };
    values.iter().position(|&v| v > factor * v0).unwrap_or(values.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticConfig};
    use crate::models::{init_classifier, init_denoiser, InitConfig};

    fn ds(n: usize, d: usize, seed: u64) -> Dataset {
        generate_dataset(&SyntheticConfig::new(d, n, 5.0, 1.0, seed)).unwrap()
    }

    #[test]
    fn replicated_signal_weights() {
        let data = ds(10, 200, 0);
        let sig = data.signals().unwrap();
        let m = 4;
        let mut w = Array2::zeros((m, 200));
        for mut r in w.rows_mut() {
            r.assign(&sig.mu_pos);
        }
        let met = denoiser_metrics(&DenoiserParams::new(w), &data, None);
        assert!((met.max_signal_pos - 25.0).abs() < 1e-12);
        assert!(met.max_noise < 1e-9);
        assert_eq!(met.w0_overlap, None);
    }

    #[test]
    fn initial_noise_scale() {
        // |⟨w⁰, ξ_i⟩| ≤ 2√(log(8mn/δ)) σ₀σ_ξ√d at δ = 0.01, checked with 3× slack.
        let (m, n, d, s0) = (20, 30, 1000, 1e-3);
        let data = ds(n, d, 1);
        let p = init_classifier(m, d, &InitConfig { sigma0: s0, seed: 1 }).unwrap();
        let met = classifier_metrics(&p, &data);
        let bound = 2.0 * ((8.0 * (m * n) as f64 / 0.01).ln()).sqrt() * s0 * (d as f64).sqrt();
        assert!(met.max_noise <= 3.0 * bound);
        assert!(met.max_noise >= 0.1 * s0 * (d as f64).sqrt());
    }

    #[test]
    fn metrics_match_naive_loops() {
        let data = ds(6, 40, 2);
        let sig = data.signals().unwrap();
        let p = init_classifier(3, 40, &InitConfig { sigma0: 0.5, seed: 2 }).unwrap();
        let met = classifier_metrics(&p, &data);
        let (mut max_n, mut sum_n) = (0.0f64, 0.0);
        for s in data.samples() {
            let w = p.block(s.label);
            for r in 0..3 {
                let v = w.row(r).dot(&s.x2).abs();
                max_n = max_n.max(v);
                sum_n += v;
            }
        }
        let mean_n = sum_n / 18.0;
        let mut sum_s = 0.0;
        for (w, mu) in [(&p.w_pos, &sig.mu_pos), (&p.w_neg, &sig.mu_neg)] {
            for r in 0..3 {
                sum_s += w.row(r).dot(mu).abs();
            }
        }
        let mean_s = sum_s / 6.0;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1e-300);
        assert!(close(met.max_noise, max_n));
        assert!(close(met.mean_noise, mean_n));
        assert!(close(met.mean_signal, mean_s));
        assert!(close(met.ratio.unwrap(), mean_s / mean_n));
    }

    #[test]
    fn ratio_undefined_without_noise_learning() {
        let data = ds(3, 20, 0);
        let met = denoiser_metrics(&DenoiserParams::zeros(2, 20), &data, None);
        assert_eq!(met.ratio, None);
        assert_eq!(met.csv_fields()[5], "NA");
    }

    #[test]
    fn decomposition_of_pure_signal() {
        let data = ds(8, 100, 3);
        let sig = data.signals().unwrap();
        let w0 = init_denoiser(1, 100, &InitConfig { sigma0: 0.1, seed: 0 }).unwrap().w;
        let w = &w0.row(0) + &(&sig.mu_pos * 3.0);
        let dec = decompose_weight(w.view(), w0.row(0), sig, &data).unwrap();
        assert!((dec.zeta_pos - 3.0).abs() < 1e-12);
        assert!(dec.zeta_neg.abs() < 1e-12);
        assert!(dec.rho.iter().all(|v| v.abs() < 1e-10));
        assert!(dec.relative_residual() < 1e-8);
    }

    #[test]
    fn decomposition_recovers_noise_coefficients() {
        let data = ds(8, 100, 4);
        let sig = data.signals().unwrap();
        let c = Array1::from_vec(vec![0.5, -1.0, 2.0, 0.0, 3.5, -0.25, 1.0, 0.75]);
        let w0 = Array1::zeros(100);
        let mut w = Array1::zeros(100);
        for (i, xi) in data.x2().rows().into_iter().enumerate() {
            w.scaled_add(c[i] / xi.dot(&xi), &xi);
        }
        let dec = decompose_weight(w.view(), w0.view(), sig, &data).unwrap();
        for (a, b) in dec.rho.iter().zip(c.iter()) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
        assert!(dec.relative_residual() < 1e-8);
    }

    #[test]
    fn decomposition_with_init_spans_initial_neurons() {
        let data = ds(5, 60, 5);
        let sig = data.signals().unwrap();
        let w0 = init_denoiser(3, 60, &InitConfig { sigma0: 0.1, seed: 5 }).unwrap().w;
        let mut w = w0.row(1).to_owned() * 2.0;
        w.scaled_add(0.5, &sig.mu_neg);
        w.scaled_add(-1.5, &w0.row(2));
        let dec = decompose_weight_with_init(w.view(), w0.row(1), &w0, sig, &data).unwrap();
        assert!((dec.zeta_neg - 0.5).abs() < 1e-9);
        assert!((dec.phi[1] - 1.0).abs() < 1e-9);
        assert!((dec.phi[2] + 1.5).abs() < 1e-9);
        assert!(dec.relative_residual() < 1e-8);
    }

    #[test]
    fn singular_gram_is_an_error() {
        let cfg = SyntheticConfig::new(4, 3, 1.0, 1.0, 0);
        let data = generate_dataset(&cfg).unwrap();
        // n = 3 noise vectors in a 2-dimensional complement.
        let sig = data.signals().unwrap();
        let w = Array1::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let err = decompose_weight(w.view(), Array1::zeros(4).view(), sig, &data).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    fn metrics(sig: f64, noise: f64, ratio: f64) -> FeatureMetrics {
        FeatureMetrics {
            max_signal_pos: sig,
            max_signal_neg: sig,
            mean_signal: sig,
            max_noise: noise,
            mean_noise: noise,
            ratio: Some(ratio),
            wnorm_min: 1.0,
            wnorm_max: 1.0,
            cross_align_min: None,
            w0_overlap: None,
        }
    }

    #[test]
    fn phase_labels() {
        let th = PhaseThresholds::default();
        assert_eq!(phase_classify(&metrics(2.0, 0.05, 40.0), &th, None), Phase::SignalDominant);
        assert_eq!(phase_classify(&metrics(0.05, 2.0, 0.025), &th, None), Phase::NoiseDominant);
        assert_eq!(phase_classify(&metrics(0.8, 1.0, 0.75), &th, Some(0.75)), Phase::Balanced);
        assert_eq!(phase_classify(&metrics(0.8, 1.0, 0.05), &th, Some(0.75)), Phase::NoiseDominant);
    }

    #[test]
    fn regime_report_values() {
        let low = regime_report(&SyntheticConfig::new(1000, 30, 5.0, 1.0, 0), 20, 1e-3, 0.1);
        assert!((low.n_snr2 - 0.75).abs() < 1e-12);
        assert!(low.flags.iter().any(|f| f.contains("n^7 m^5")));
        let high = regime_report(&SyntheticConfig::new(1000, 30, 15.0, 1.0, 0), 20, 1e-3, 0.1);
        assert!((high.n_snr2 - 6.75).abs() < 1e-12);
        let noisy = regime_report(&SyntheticConfig::new(1000, 30, 5.0, 50.0, 0), 20, 1e-3, 0.1);
        assert!(noisy.flags.iter().any(|f| f.contains("sigma_xi")));
        assert!(format!("{low}").contains("n*SNR^2"));
    }

    #[test]
    fn fits_and_windows() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let (s, b, r2) = linear_fit(&x, &y);
        assert!((s - 3.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert_eq!(first_stage_by_loss(&[1.0, 0.99, 0.96, 0.95, 0.5], 0.05), 3);
        assert_eq!(first_stage_by_loss(&[1.0, 0.99], 0.05), 2);
        assert_eq!(first_stage_by_growth(&[1.0, 1.2, 1.6, 3.0], 1.5), 2);
    }
}
