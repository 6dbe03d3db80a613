//! Central finite differences and the randomized gradient-check suite.

use std::path::Path;

use rand::Rng as _;
use serde::Serialize;

use crate::data::{generate_dataset, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::models::{init_classifier, init_denoiser, InitConfig, ParamSet};
use crate::objectives::classification::{classification_loss, classification_loss_grad};
use crate::objectives::ddpm::{ddpm_expected_loss, ddpm_expected_loss_grad_with, ddpm_mc_loss, Fault};
use crate::objectives::schedule::{make_schedule, NoiseSchedule};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdStep {
    /// The same step for every coordinate.
    Fixed(f64),
    /// `h · (1 + |w_k|)` for coordinate `k`.
    Scaled(f64),
}

impl FdStep {
    fn at(self, w: f64) -> f64 {
        match self {
            FdStep::Fixed(h) => h,
            FdStep::Scaled(h) => h * (1.0 + w.abs()),
        }
    }
}

/// `(L(w + h e_k) − L(w − h e_k)) / 2h` for every coordinate `k`.
pub fn finite_diff_grad<P: ParamSet>(loss: impl Fn(&P) -> f64, params: &P, step: FdStep) -> P {
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    for k in 0..params.num_coords() {
        let w = params.coord(k);
        let h = step.at(w);
        *probe.coord_mut(k) = w + h;
        let up = loss(&probe);
        *probe.coord_mut(k) = w - h;
        let down = loss(&probe);
        *probe.coord_mut(k) = w;
        *out.coord_mut(k) = (up - down) / (2.0 * h);
    }
    out
}

/// Fourth-order central differences,
/// `(−L(w+2h) + 8L(w+h) − 8L(w−h) + L(w−2h)) / 12h`.
pub fn finite_diff_grad4<P: ParamSet>(loss: impl Fn(&P) -> f64, params: &P, step: FdStep) -> P {
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    for k in 0..params.num_coords() {
        let w = params.coord(k);
        let h = step.at(w);
        let mut at = |x: f64| {
            *probe.coord_mut(k) = x;
            loss(&probe)
        };
        let (p2, p1, m1, m2) = (at(w + 2.0 * h), at(w + h), at(w - h), at(w - 2.0 * h));
        *probe.coord_mut(k) = w;
        *out.coord_mut(k) = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    out
}

/// Relative error of one coordinate. The denominator is floored at
/// `10⁻³ · scale` so coordinates whose true derivative is near zero are
/// judged against the size of the whole gradient.
pub fn rel_err(analytic: f64, fd: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE);
    (analytic - fd).abs() / denom
}

fn inf_norm<P: ParamSet>(p: &P) -> f64 {
    p.blocks().iter().flat_map(|b| b.iter()).fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Largest [`rel_err`] over all coordinates, with `scale = ‖fd‖_∞`.
pub fn max_rel_err<P: ParamSet>(analytic: &P, fd: &P) -> f64 {
    let scale = inf_norm(fd);
    (0..fd.num_coords())
        .map(|k| rel_err(analytic.coord(k), fd.coord(k), scale))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    ClassifierGrad,
    DdpmGrad,
    DdpmMonteCarlo,
}

/// One row of the gradcheck report.
///
/// For gradient checks `coordinate` is the flat parameter index; for the
/// Monte-Carlo check it is 0, `analytic` is the closed-form loss, `fd` the MC
/// estimate and `rel_err` the deviation in standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub instance: usize,
    pub check: CheckKind,
    pub coordinate: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub grad_tol: f64,
    /// Instances (the first `mc_instances`) also checked against the MC oracle.
    pub mc_instances: usize,
    pub mc_draws: usize,
    /// Allowed deviation in standard errors.
    pub mc_sigmas: f64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 100,
            seed: 0,
            grad_tol: 1e-6,
            mc_instances: 20,
            mc_draws: 200_000,
            mc_sigmas: 3.0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
    pub max_classifier_err: f64,
    pub max_ddpm_err: f64,
    pub max_mc_sigmas: f64,
    pub passed: bool,
}

impl GradcheckReport {
    /// The `k` rows with the largest error among failing checks.
    pub fn worst(&self, k: usize, cfg: &GradcheckConfig) -> Vec<&CheckRow> {
        let mut bad: Vec<&CheckRow> = self
            .rows
            .iter()
            .filter(|r| match r.check {
                CheckKind::DdpmMonteCarlo => r.rel_err > cfg.mc_sigmas,
                _ => r.rel_err > cfg.grad_tol,
            })
            .collect();
        bad.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        bad.truncate(k);
        bad
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A random small problem: `d ≤ 30`, `n ≤ 8`, `m ≤ 4`.
pub struct Instance {
    pub data: Dataset,
    pub m: usize,
    pub sched: NoiseSchedule,
    pub init: InitConfig,
}

pub fn random_instance(seed: u64, index: usize) -> Instance {
    let mut r = rng::stream(seed.wrapping_add(index as u64), Stream::Test);
    let d = r.random_range(3..=30);
    let n = r.random_range(1..=8);
    let m = r.random_range(1..=4);
    let mu = r.random_range(0.5..3.0);
    let t = r.random_range(0.05..2.0);
    let data_seed: u64 = r.random();
    let cfg = SyntheticConfig::new(d, n, mu, 1.0, data_seed);
    Instance {
        data: generate_dataset(&cfg).expect("valid random config"),
        m,
        sched: make_schedule(t).expect("positive time"),
        init: InitConfig {
            sigma0: 0.5 / (d as f64).sqrt(),
            seed: data_seed,
        },
    }
}

fn grad_rows<P: ParamSet>(instance: usize, check: CheckKind, analytic: &P, fd: &P, rows: &mut Vec<CheckRow>) -> f64 {
    let scale = inf_norm(fd);
    let mut worst = 0.0f64;
    for k in 0..fd.num_coords() {
        let (a, f) = (analytic.coord(k), fd.coord(k));
        let e = rel_err(a, f, scale);
        worst = worst.max(e);
        rows.push(CheckRow {
            instance,
            check,
            coordinate: k,
            analytic: a,
            fd: f,
            rel_err: e,
        });
    }
    worst
}

/// Check both analytic gradients against finite differences of their own
/// losses, and the closed-form DDPM loss against the Monte-Carlo oracle.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let step = FdStep::Scaled(1e-3);
    let mut rows = Vec::new();
    let (mut cls_err, mut ddpm_err, mut mc_dev) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..cfg.instances {
        let inst = random_instance(cfg.seed, i);
        let ds = &inst.data;

        let cp = init_classifier(inst.m, ds.d(), &inst.init)?;
        let (_, g) = classification_loss_grad(&cp, ds)?;
        let fd = finite_diff_grad4(|p| classification_loss(p, ds).expect("valid"), &cp, step);
        cls_err = cls_err.max(grad_rows(i, CheckKind::ClassifierGrad, &g, &fd, &mut rows));

        let dp = init_denoiser(inst.m, ds.d(), &inst.init)?;
        let (exact, g) = ddpm_expected_loss_grad_with(&dp, ds, &inst.sched, cfg.fault)?;
        let fd = finite_diff_grad4(|p| ddpm_expected_loss(p, ds, &inst.sched).expect("valid"), &dp, step);
        ddpm_err = ddpm_err.max(grad_rows(i, CheckKind::DdpmGrad, &g, &fd, &mut rows));

        if i < cfg.mc_instances {
            let mut r = rng::stream(cfg.seed.wrapping_add(i as u64), Stream::Diffusion);
            let est = ddpm_mc_loss(&dp, ds, &inst.sched, cfg.mc_draws, &mut r)?;
            let dev = (est.estimate - exact).abs() / est.std_err;
            mc_dev = mc_dev.max(dev);
            rows.push(CheckRow {
                instance: i,
                check: CheckKind::DdpmMonteCarlo,
                coordinate: 0,
                analytic: exact,
                fd: est.estimate,
                rel_err: dev,
            });
        }
    }
    let passed = cls_err <= cfg.grad_tol && ddpm_err <= cfg.grad_tol && mc_dev <= cfg.mc_sigmas;
    Ok(GradcheckReport {
        rows,
        max_classifier_err: cls_err,
        max_ddpm_err: ddpm_err,
        max_mc_sigmas: mc_dev,
        passed,
    })
}
