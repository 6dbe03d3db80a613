//! Full-batch gradient descent with metric capture.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{FeatureMetrics, Observable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ClassifierParams, DenoiserParams, ParamSet};
use crate::objectives::classification::classification_loss_grad;
use crate::objectives::ddpm::{ddpm_expected_loss_grad, ddpm_mc_loss_grad};
use crate::objectives::schedule::NoiseSchedule;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Objective {
    #[default]
    Exact,
    MonteCarlo { n_eps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub iters: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Stop once `‖∇‖_F ≤ grad_tol`; `0` disables the test.
    #[serde(default)]
    pub grad_tol: f64,
    #[serde(default)]
    pub objective: Objective,
    /// Seed of the diffusion-noise stream in Monte-Carlo mode.
    #[serde(default)]
    pub mc_seed: u64,
}

fn default_record_every() -> usize {
    10
}

impl TrainConfig {
    pub fn new(eta: f64, iters: usize) -> Self {
        TrainConfig {
            eta,
            iters,
            record_every: default_record_every(),
            grad_tol: 0.0,
            objective: Objective::Exact,
            mc_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.iters < 1 {
            return Err(Error::config("iters must be >= 1"));
        }
        if self.record_every < 1 {
            return Err(Error::config("record_every must be >= 1"));
        }
        if self.grad_tol.is_nan() || self.grad_tol < 0.0 {
            return Err(Error::config(format!("grad_tol must be >= 0, got {}", self.grad_tol)));
        }
        if let Objective::MonteCarlo { n_eps } = self.objective {
            if n_eps < 2 {
                return Err(Error::config(format!("n_eps must be >= 2, got {n_eps}")));
            }
        }
        Ok(())
    }

    /// Iteration `k` is recorded if it is a multiple of `record_every` or a
    /// power of two (so early growth is resolved on a log axis).
    pub fn is_record_iter(&self, k: usize) -> bool {
        k.is_multiple_of(self.record_every) || k.is_power_of_two()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub metrics: FeatureMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    GradTol,
    NonFinite,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::MaxIters => "max_iters",
            StopReason::GradTol => "grad_tol",
            StopReason::NonFinite => "nonfinite",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<P> {
    pub records: Vec<TrajectoryRecord>,
    pub final_params: P,
    pub stop_reason: StopReason,
}

impl<P> Trajectory<P> {
    pub fn last(&self) -> &TrajectoryRecord {
        self.records.last().expect("trajectories are non-empty")
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// `‖∇‖_F ≤ tol`.
pub fn check_stationarity<P: ParamSet>(grads: &P, tol: f64) -> bool {
    grads.frobenius_norm() <= tol
}

/// Called with every recorded snapshot and the parameters it describes.
pub type Observer<'a, P> = dyn FnMut(&TrajectoryRecord, &P) + 'a;

/// Shared loop. `step` returns `(loss, training gradient, stationarity gradient norm)`.
fn descend<P, F>(params0: &P, ds: &Dataset, cfg: &TrainConfig, mut step: F, observer: &mut Observer<'_, P>) -> Result<Trajectory<P>>
where
    P: ParamSet + Observable,
    F: FnMut(&P) -> Result<(f64, P, f64)>,
{
    cfg.validate()?;
    let mut params = params0.clone();
    let mut records = Vec::new();
    let mut record = |k: usize, loss: f64, gn: f64, p: &P, records: &mut Vec<TrajectoryRecord>| {
        let rec = TrajectoryRecord {
            iter: k,
            loss,
            grad_norm: gn,
            metrics: p.metrics(ds, params0),
        };
        observer(&rec, p);
        records.push(rec);
    };
    for k in 0..=cfg.iters {
        let (loss, grad, gn) = step(&params)?;
        if !loss.is_finite() || !gn.is_finite() || !grad.is_finite() || !params.is_finite() {
            record(k, loss, gn, &params, &mut records);
            return Ok(Trajectory {
                records,
                final_params: params,
                stop_reason: StopReason::NonFinite,
            });
        }
        let stationary = cfg.grad_tol > 0.0 && gn <= cfg.grad_tol;
        if stationary || k == cfg.iters || cfg.is_record_iter(k) {
            record(k, loss, gn, &params, &mut records);
        }
        if stationary || k == cfg.iters {
            let stop_reason = if stationary { StopReason::GradTol } else { StopReason::MaxIters };
            return Ok(Trajectory {
                records,
                final_params: params,
                stop_reason,
            });
        }
        params.axpy(-cfg.eta, &grad);
    }
    unreachable!("loop returns at k == iters")
}

pub fn train_classifier(params0: &ClassifierParams, ds: &Dataset, cfg: &TrainConfig) -> Result<Trajectory<ClassifierParams>> {
    train_classifier_observed(params0, ds, cfg, &mut |_, _| {})
}

pub fn train_classifier_observed(
    params0: &ClassifierParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_, ClassifierParams>,
) -> Result<Trajectory<ClassifierParams>> {
    if cfg.objective != Objective::Exact {
        return Err(Error::config("the classifier only supports the exact objective"));
    }
    descend(
        params0,
        ds,
        cfg,
        |p| {
            let (loss, g) = classification_loss_grad(p, ds)?;
            let gn = g.frobenius_norm();
            Ok((loss, g, gn))
        },
        observer,
    )
}

pub fn train_denoiser(
    params0: &DenoiserParams,
    ds: &Dataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Trajectory<DenoiserParams>> {
    train_denoiser_observed(params0, ds, sched, cfg, &mut |_, _| {})
}

/// Denoiser training. In Monte-Carlo mode the recorded loss is the sampled
/// estimate; the recorded gradient norm (and the stationarity test) always
/// uses the exact expected gradient.
pub fn train_denoiser_observed(
    params0: &DenoiserParams,
    ds: &Dataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    observer: &mut Observer<'_, DenoiserParams>,
) -> Result<Trajectory<DenoiserParams>> {
    let mut mc_rng = rng::stream(cfg.mc_seed, Stream::Diffusion);
    descend(
        params0,
        ds,
        cfg,
        |p| {
            let (loss, exact) = ddpm_expected_loss_grad(p, ds, sched)?;
            let gn = exact.frobenius_norm();
            match cfg.objective {
                Objective::Exact => Ok((loss, exact, gn)),
                Objective::MonteCarlo { n_eps } => {
                    let (est, g) = ddpm_mc_loss_grad(p, ds, sched, n_eps, &mut mc_rng)?;
                    Ok((est.estimate, g, gn))
                }
            }
        },
        observer,
    )
}

/// Column order of trajectory CSV files.
pub fn trajectory_header() -> Vec<&'static str> {
    let mut h = vec!["iter", "loss", "grad_norm"];
    h.extend(FeatureMetrics::COLUMNS);
    h
}

fn record_fields(r: &TrajectoryRecord) -> Vec<String> {
    let mut f = vec![r.iter.to_string(), format!("{:e}", r.loss), format!("{:e}", r.grad_norm)];
    f.extend(r.metrics.csv_fields());
    f
}

/// Streams records to a CSV file as they arrive.
pub struct TrajectoryWriter {
    out: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl TrajectoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = TrajectoryWriter {
            out: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.line(&trajectory_header().join(","))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, r: &TrajectoryRecord) -> Result<()> {
        self.line(&record_fields(r).join(","))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_trajectory_csv(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = TrajectoryWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticConfig};
    use crate::models::{init_classifier, init_denoiser, InitConfig};
    use crate::objectives::schedule::make_schedule;

    fn small() -> (Dataset, ClassifierParams, DenoiserParams) {
        let ds = generate_dataset(&SyntheticConfig::new(50, 6, 3.0, 1.0, 0)).unwrap();
        let init = InitConfig { sigma0: 0.05, seed: 0 };
        (ds, init_classifier(4, 50, &init).unwrap(), init_denoiser(4, 50, &init).unwrap())
    }

    #[test]
    fn record_grid() {
        let mut cfg = TrainConfig::new(0.1, 100);
        cfg.record_every = 25;
        let recorded: Vec<usize> = (0..=100).filter(|&k| cfg.is_record_iter(k)).collect();
        assert_eq!(recorded, vec![0, 1, 2, 4, 8, 16, 25, 32, 50, 64, 75, 100]);
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let (ds, cp, dp) = small();
        let cfg = TrainConfig::new(0.0, 20);
        let t = train_classifier(&cp, &ds, &cfg).unwrap();
        assert_eq!(t.final_params, cp);
        assert!(t.records.iter().all(|r| r.loss == t.records[0].loss));
        let s = make_schedule(0.2).unwrap();
        let t = train_denoiser(&dp, &ds, &s, &cfg).unwrap();
        assert_eq!(t.final_params, dp);
        assert_eq!(t.stop_reason, StopReason::MaxIters);
        assert_eq!(t.last().iter, 20);
    }

    #[test]
    fn single_step_matches_objective() {
        let (ds, cp, _) = small();
        let cfg = TrainConfig::new(0.3, 1);
        let t = train_classifier(&cp, &ds, &cfg).unwrap();
        let (_, g) = classification_loss_grad(&cp, &ds).unwrap();
        let mut expected = cp.clone();
        expected.axpy(-0.3, &g);
        assert_eq!(t.final_params, expected);
    }

    #[test]
    fn determinism() {
        let (ds, _, dp) = small();
        let s = make_schedule(0.2).unwrap();
        let mut cfg = TrainConfig::new(0.01, 30);
        cfg.objective = Objective::MonteCarlo { n_eps: 16 };
        let a = train_denoiser(&dp, &ds, &s, &cfg).unwrap();
        let b = train_denoiser(&dp, &ds, &s, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_params, b.final_params);
        assert!(a.records.iter().all(|r| r.loss >= 0.0));
    }

    #[test]
    fn stops_on_gradient_tolerance() {
        let (ds, _, dp) = small();
        let s = make_schedule(0.2).unwrap();
        let mut cfg = TrainConfig::new(0.0, 10);
        cfg.grad_tol = 1e300;
        let t = train_denoiser(&dp, &ds, &s, &cfg).unwrap();
        assert_eq!(t.stop_reason, StopReason::GradTol);
        assert_eq!(t.records.len(), 1);
    }

    #[test]
    fn divergence_is_reported() {
        let (ds, _, dp) = small();
        let s = make_schedule(0.2).unwrap();
        let mut big = dp.clone();
        big.w *= 50.0;
        let t = train_denoiser(&big, &ds, &s, &TrainConfig::new(10.0, 200)).unwrap();
        assert_eq!(t.stop_reason, StopReason::NonFinite);
        assert!(t.last().iter < 200);
    }

    #[test]
    fn stationarity_predicate() {
        let z = DenoiserParams::zeros(2, 3);
        assert!(check_stationarity(&z, 0.0));
        let mut g = z.clone();
        g.w[[0, 0]] = 1e-300;
        assert!(!check_stationarity(&g, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(-1.0, 1).validate().is_err());
        assert!(TrainConfig::new(0.1, 0).validate().is_err());
        let mut c = TrainConfig::new(0.1, 1);
        c.record_every = 0;
        assert!(c.validate().is_err());
        c.record_every = 1;
        c.objective = Objective::MonteCarlo { n_eps: 1 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_stream() {
        let (ds, cp, _) = small();
        let t = train_classifier(&cp, &ds, &TrainConfig::new(0.1, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        write_trajectory_csv(&p, &t.records).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,loss,grad_norm,max_signal_pos,max_signal_neg,mean_signal,max_noise,mean_noise,ratio,wnorm_min,wnorm_max,cross_align_min,w0_overlap"
        );
        assert_eq!(lines.count(), t.records.len());
    }
}
