//! End-to-end experiment runner used by the CLI: data, training, metrics
//! and all output files.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array1, Axis};
use rayon::prelude::*;

use crate::analysis::{phase_classify, regime_report, FeatureMetrics, Phase};
use crate::config::{DataSpec, ExperimentSpec, ModelKind, SweepSpec};
use crate::data::{generate_dataset, generate_test_set, snr_quantities, Dataset};
use crate::error::{Error, Result};
use crate::mnist::{
    accuracy, build_noisy_mnist, build_noisy_mnist_test, denoiser_predict, input_gradient_map, load_split,
    patch_energy, reconstruct_with, write_matrix_csv, IMAGE_SIDE,
};
use crate::models::{init_classifier, init_denoiser, write_checkpoint, CheckpointMeta, DenoiserParams, ParamSet};
use crate::objectives::schedule::{make_schedule, NoiseSchedule};
use crate::plot::{image_grid_svg, line_chart_svg, write_svg, ChartOptions, Series};
use crate::rng::{self, Stream};
use crate::trainer::{
    train_classifier_observed, train_denoiser_observed, Observer, StopReason, Trajectory, TrajectoryRecord,
    TrajectoryWriter,
};

/// Final state of one run, as written to `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub model: ModelKind,
    pub seed: u64,
    /// `‖μ‖` for synthetic data, `SNR~` for Noisy-MNIST.
    pub signal_scale: f64,
    pub n_snr2: Option<f64>,
    pub stop_reason: StopReason,
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub metrics: FeatureMetrics,
    pub phase: Phase,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Mean signal-patch reconstruction error (trained, zero-weight baseline).
    pub reconstruction: Option<(f64, f64)>,
    /// Mean fraction of input-gradient energy on the noise patch.
    pub gradient_noise_share: Option<f64>,
}

impl RunSummary {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = [
            "name",
            "model",
            "seed",
            "signal_scale",
            "n_snr2",
            "stop_reason",
            "iter",
            "loss",
            "grad_norm",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(FeatureMetrics::COLUMNS.iter().map(|s| s.to_string()));
        h.extend(
            [
                "phase",
                "train_acc",
                "test_acc",
                "recon_err",
                "recon_err_baseline",
                "gradmap_noise_share",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        h
    }

    pub fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:e}"));
        let mut f = vec![
            self.name.clone(),
            self.model.to_string(),
            self.seed.to_string(),
            format!("{:e}", self.signal_scale),
            opt(self.n_snr2),
            self.stop_reason.to_string(),
            self.iter.to_string(),
            format!("{:e}", self.loss),
            format!("{:e}", self.grad_norm),
        ];
        f.extend(self.metrics.csv_fields());
        f.push(self.phase.to_string());
        f.push(opt(self.train_accuracy));
        f.push(opt(self.test_accuracy));
        f.push(opt(self.reconstruction.map(|r| r.0)));
        f.push(opt(self.reconstruction.map(|r| r.1)));
        f.push(opt(self.gradient_noise_share));
        f
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header())?;
        w.write_record(self.fields())?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct Loaded {
    train: Dataset,
    test: Dataset,
    seed: u64,
    signal_scale: f64,
    n_snr2: Option<f64>,
}

fn load_data(spec: &ExperimentSpec) -> Result<Loaded> {
    match &spec.data {
        DataSpec::Synthetic(c) => Ok(Loaded {
            train: generate_dataset(c)?,
            test: generate_test_set(c, spec.eval.test_samples)?,
            seed: c.seed,
            signal_scale: c.mu_norm,
            n_snr2: Some(snr_quantities(c).1),
        }),
        DataSpec::Mnist(m) => {
            let dir = m.resolve_dir()?;
            let cfg = m.noisy_config();
            let train = build_noisy_mnist(&load_split(&dir, true)?, &cfg)?;
            let test = build_noisy_mnist_test(&load_split(&dir, false)?, &cfg)?;
            Ok(Loaded {
                train,
                test,
                seed: m.seed,
                signal_scale: m.snr_tilde,
                n_snr2: None,
            })
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Stream records to `trajectory.csv`, keeping the first write error.
fn csv_observer<'a, P>(writer: &'a mut TrajectoryWriter, err: &'a mut Option<Error>) -> impl FnMut(&TrajectoryRecord, &P) + 'a {
    move |rec, _| {
        if err.is_none() {
            if let Err(e) = writer.write(rec) {
                *err = Some(e);
            }
        }
    }
}

fn trajectory_plot(records: &[TrajectoryRecord], title: &str, per_sample: bool) -> Result<String> {
    let x: Vec<f64> = records.iter().map(|r| r.iter as f64).collect();
    let pick = |f: fn(&FeatureMetrics) -> f64| records.iter().map(|r| f(&r.metrics)).collect::<Vec<f64>>();
    let series = if per_sample {
        vec![
            Series {
                name: "mean_signal".into(),
                x: x.clone(),
                y: pick(|m| m.mean_signal),
            },
            Series {
                name: "mean_noise".into(),
                x,
                y: pick(|m| m.mean_noise),
            },
        ]
    } else {
        vec![
            Series {
                name: "max_signal".into(),
                x: x.clone(),
                y: pick(|m| m.max_signal()),
            },
            Series {
                name: "max_noise".into(),
                x,
                y: pick(|m| m.max_noise),
            },
        ]
    };
    line_chart_svg(
        &series,
        &ChartOptions {
            title: title.to_string(),
            x_label: "iteration".into(),
            y_label: "inner product".into(),
            log_x: true,
            ..Default::default()
        },
    )
}

fn finish<P: ParamSet>(
    spec: &ExperimentSpec,
    data: &Loaded,
    out: &Path,
    traj: &Trajectory<P>,
) -> Result<RunSummary> {
    let last = traj.last();
    let meta = CheckpointMeta {
        m: spec.width,
        d: data.train.d(),
        sigma0: spec.init.sigma0,
        seed: spec.init.seed,
        iteration: last.iter,
    };
    write_checkpoint(&out.join("params_final.csv"), &traj.final_params, &meta)?;
    let per_sample = data.train.signals().is_none();
    let title = format!("{} ({})", spec.name, spec.model);
    write_svg(&out.join("plot.svg"), &trajectory_plot(&traj.records, &title, per_sample)?)?;
    if let DataSpec::Synthetic(c) = &spec.data {
        let report = regime_report(c, spec.width, spec.init.sigma0, spec.train.eta);
        std::fs::write(out.join("regime.txt"), report.to_string()).map_err(|e| Error::io(out, e))?;
    }
    Ok(RunSummary {
        name: spec.name.clone(),
        model: spec.model,
        seed: data.seed,
        signal_scale: data.signal_scale,
        n_snr2: data.n_snr2,
        stop_reason: traj.stop_reason,
        iter: last.iter,
        loss: last.loss,
        grad_norm: last.grad_norm,
        metrics: last.metrics,
        phase: phase_classify(&last.metrics, &spec.eval.phase, data.n_snr2),
        train_accuracy: None,
        test_accuracy: None,
        reconstruction: None,
        gradient_noise_share: None,
    })
}

/// Run one experiment and write `trajectory.csv`, `summary.csv`,
/// `params_final.csv`, `plot.svg` (plus `regime.txt` for synthetic data and
/// gradient-map or reconstruction dumps for Noisy-MNIST) into `out`.
///
/// A diverging run still returns `Ok` with `stop_reason = NonFinite`; its
/// partial outputs are kept.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<RunSummary> {
    spec.validate()?;
    let data = load_data(spec)?;
    create_dir(out)?;
    let mut writer = TrajectoryWriter::create(&out.join("trajectory.csv"))?;
    let mut werr = None;
    let d = data.train.d();
    let mut summary = match spec.model {
        ModelKind::Classifier => {
            let p0 = init_classifier(spec.width, d, &spec.init)?;
            let traj = {
                let obs: &mut Observer<'_, _> = &mut csv_observer(&mut writer, &mut werr);
                train_classifier_observed(&p0, &data.train, &spec.train, obs)?
            };
            let mut s = finish(spec, &data, out, &traj)?;
            if traj.stop_reason != StopReason::NonFinite {
                s.train_accuracy = Some(accuracy(&traj.final_params, &data.train)?);
                s.test_accuracy = Some(accuracy(&traj.final_params, &data.test)?);
                if matches!(spec.data, DataSpec::Mnist(_)) {
                    s.gradient_noise_share = Some(gradient_maps(&traj.final_params, &data.test, spec.eval.gradient_maps, out)?);
                }
            }
            s
        }
        ModelKind::Diffusion => {
            let sched = make_schedule(spec.diffusion.as_ref().map(|d| d.t).unwrap_or(0.0))?;
            let p0 = init_denoiser(spec.width, d, &spec.init)?;
            let traj = {
                let obs: &mut Observer<'_, _> = &mut csv_observer(&mut writer, &mut werr);
                train_denoiser_observed(&p0, &data.train, &sched, &spec.train, obs)?
            };
            let mut s = finish(spec, &data, out, &traj)?;
            if traj.stop_reason != StopReason::NonFinite && matches!(spec.data, DataSpec::Mnist(_)) {
                let count = spec.diffusion.as_ref().map_or(20, |d| d.reconstructions);
                s.reconstruction = Some(reconstructions(&traj.final_params, &data.test, &sched, count, data.seed, out)?);
            }
            s
        }
    };
    if let Some(e) = werr {
        return Err(e);
    }
    writer.finish()?;
    summary.name = spec.name.clone();
    summary.write_csv(&out.join("summary.csv"))?;
    Ok(summary)
}

/// Indices of the first `k/2` test samples of each class (positive first).
fn balanced_indices(ds: &Dataset, k: usize) -> Vec<usize> {
    let half = k.div_ceil(2);
    let pick = |y: f64| {
        (0..ds.n())
            .filter(move |&i| ds.labels()[i] == y)
            .take(half)
            .collect::<Vec<_>>()
    };
    let mut idx = pick(1.0);
    idx.extend(pick(-1.0));
    idx.truncate(k);
    idx
}

/// Input-gradient maps of test images; writes `gradmaps.csv` and
/// `gradmaps.svg` and returns the mean noise-patch share of gradient energy.
fn gradient_maps(params: &crate::models::ClassifierParams, test: &Dataset, k: usize, out: &Path) -> Result<f64> {
    let idx = balanced_indices(test, k);
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let d = test.d();
    let mut rows = ndarray::Array2::zeros((idx.len(), 2 * d));
    let mut tiles = Vec::new();
    let mut titles = Vec::new();
    let mut share = 0.0;
    for (row, &i) in idx.iter().enumerate() {
        let s = test.sample(i);
        let g = input_gradient_map(params, &s);
        let (es, en) = patch_energy(g.view());
        share += en / (es + en).max(f64::MIN_POSITIVE);
        rows.row_mut(row).assign(&g);
        tiles.push(s.x1.to_vec());
        tiles.push(g.slice(s![..d]).to_vec());
        tiles.push(g.slice(s![d..]).to_vec());
        titles.extend([format!("x1 (y={})", s.label), "grad x1".to_string(), "grad x2".to_string()]);
    }
    write_matrix_csv(&out.join("gradmaps.csv"), &rows)?;
    if d == IMAGE_SIDE * IMAGE_SIDE {
        write_svg(&out.join("gradmaps.svg"), &image_grid_svg(&tiles, IMAGE_SIDE, 3, &titles, true))?;
    }
    Ok(share / idx.len() as f64)
}

/// Signal-patch reconstruction errors `‖x̂₀⁽¹⁾ − x₀⁽¹⁾‖` averaged over test
/// images, for the trained denoiser and for `W = 0` on the same noise draws.
pub fn reconstruction_errors(
    params: &DenoiserParams,
    test: &Dataset,
    sched: &NoiseSchedule,
    idx: &[usize],
    seed: u64,
) -> (f64, f64, Vec<[Array1<f64>; 3]>) {
    let d = test.d();
    let zero = DenoiserParams::zeros(params.m(), d);
    let mut r = rng::stream(seed, Stream::Reconstruct);
    let (mut tr, mut base) = (0.0, 0.0);
    let mut examples = Vec::new();
    for &i in idx {
        let s = test.sample(i);
        let x0 = concatenate(Axis(0), &[s.x1, s.x2]).expect("same width");
        let eps = crate::data::gaussian_vec(2 * d, 1.0, &mut r);
        let rec = reconstruct_with(|x| denoiser_predict(params, x), x0.view(), eps.view(), sched);
        let rec0 = reconstruct_with(|x| denoiser_predict(&zero, x), x0.view(), eps.view(), sched);
        let err = |v: &Array1<f64>| {
            let diff = &v.slice(s![..d]) - &s.x1;
            diff.dot(&diff).sqrt()
        };
        tr += err(&rec);
        base += err(&rec0);
        let noisy = &x0.slice(s![..d]) * sched.alpha + &eps.slice(s![..d]) * sched.beta;
        examples.push([s.x1.to_owned(), noisy, rec.slice(s![..d]).to_owned()]);
    }
    let k = idx.len().max(1) as f64;
    (tr / k, base / k, examples)
}

fn reconstructions(
    params: &DenoiserParams,
    test: &Dataset,
    sched: &NoiseSchedule,
    k: usize,
    seed: u64,
    out: &Path,
) -> Result<(f64, f64)> {
    let idx = balanced_indices(test, k);
    let (tr, base, examples) = reconstruction_errors(params, test, sched, &idx, seed);
    let d = test.d();
    let mut rows = ndarray::Array2::zeros((examples.len() * 3, d));
    let mut tiles = Vec::new();
    let mut titles = Vec::new();
    for (e, ex) in examples.iter().enumerate() {
        for (j, (v, t)) in ex.iter().zip(["clean", "noisy", "denoised"]).enumerate() {
            rows.row_mut(3 * e + j).assign(v);
            tiles.push(v.to_vec());
            titles.push(t.to_string());
        }
    }
    write_matrix_csv(&out.join("reconstructions.csv"), &rows)?;
    if d == IMAGE_SIDE * IMAGE_SIDE && !tiles.is_empty() {
        write_svg(&out.join("reconstructions.svg"), &image_grid_svg(&tiles, IMAGE_SIDE, 3, &titles, false))?;
    }
    Ok((tr, base))
}

/// One row of `ratio_vs_nsnr2.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: ModelKind,
    pub mu_norm: f64,
    pub seed: u64,
    pub n_snr2: f64,
    pub outcome: std::result::Result<RunSummary, String>,
}

impl SweepRow {
    pub fn ratio(&self) -> Option<f64> {
        self.outcome.as_ref().ok().and_then(|s| s.metrics.ratio)
    }

    fn fields(&self) -> Vec<String> {
        let (ratio, phase, stop, status) = match &self.outcome {
            Ok(s) => (
                s.metrics.ratio.map_or_else(|| "NA".into(), |r| format!("{r:e}")),
                s.phase.to_string(),
                s.stop_reason.to_string(),
                "ok".to_string(),
            ),
            Err(e) => ("NA".into(), "NA".into(), "NA".into(), format!("failed: {e}")),
        };
        vec![
            self.model.to_string(),
            format!("{}", self.mu_norm),
            self.seed.to_string(),
            format!("{:e}", self.n_snr2),
            ratio,
            phase,
            stop,
            status,
        ]
    }
}

fn cell_name(model: ModelKind, mu: f64, seed: u64) -> String {
    format!("{model}_mu{mu}_seed{seed}")
}

/// Run every `(base, μ, seed)` cell with at most `jobs` in parallel. Failed
/// cells are recorded and the sweep continues. Writes per-cell outputs,
/// `ratio_vs_nsnr2.csv` and `ratio_vs_nsnr2.svg` under `out`.
pub fn run_sweep(spec: &SweepSpec, out: &Path, jobs: usize) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    create_dir(out)?;
    let mut cells = Vec::new();
    for base in &spec.base {
        for &mu in &spec.mu_values {
            for &seed in &spec.seeds {
                let mut e = base.with_seed(seed);
                if let DataSpec::Synthetic(c) = &mut e.data {
                    c.mu_norm = mu;
                }
                let name = cell_name(e.model, mu, seed);
                e.output_dir = Some(out.join(&name));
                e.name = name;
                cells.push((e, mu, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|(e, mu, seed)| {
                let n_snr2 = match &e.data {
                    DataSpec::Synthetic(c) => snr_quantities(c).1,
                    DataSpec::Mnist(_) => f64::NAN,
                };
                let dir: PathBuf = e.output_dir.clone().expect("set above");
                let outcome = run_experiment(e, &dir).map_err(|err| err.to_string());
                SweepRow {
                    model: e.model,
                    mu_norm: *mu,
                    seed: *seed,
                    n_snr2,
                    outcome,
                }
            })
            .collect()
    });
    write_sweep_table(&out.join("ratio_vs_nsnr2.csv"), &rows)?;
    write_svg(&out.join("ratio_vs_nsnr2.svg"), &sweep_plot(&rows)?)?;
    Ok(rows)
}

fn write_sweep_table(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "mu_norm", "seed", "n_snr2", "ratio", "phase", "stop_reason", "status"])?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seed-averaged ratio against `n·SNR²`, one curve per model, log-log.
fn sweep_plot(rows: &[SweepRow]) -> Result<String> {
    let mut series = Vec::new();
    for model in [ModelKind::Diffusion, ModelKind::Classifier] {
        let mut pts: Vec<(f64, Vec<f64>)> = Vec::new();
        for r in rows.iter().filter(|r| r.model == model) {
            let Some(v) = r.ratio() else { continue };
            match pts.iter_mut().find(|p| p.0 == r.n_snr2) {
                Some(p) => p.1.push(v),
                None => pts.push((r.n_snr2, vec![v])),
            }
        }
        if pts.is_empty() {
            continue;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(Series {
            name: model.to_string(),
            x: pts.iter().map(|p| p.0).collect(),
            y: pts.iter().map(|p| p.1.iter().sum::<f64>() / p.1.len() as f64).collect(),
        });
    }
    if let Some(first) = series.first() {
        let x = first.x.clone();
        series.push(Series {
            name: "y = n*SNR^2".into(),
            y: x.clone(),
            x,
        });
    }
    if series.is_empty() {
        return Err(Error::NonFinite("every sweep cell failed".into()));
    }
    line_chart_svg(
        &series,
        &ChartOptions {
            title: "signal/noise learning ratio".into(),
            x_label: "n * SNR^2".into(),
            y_label: "mean signal / mean noise".into(),
            log_x: true,
            log_y: true,
            markers: true,
            ..Default::default()
        },
    )
}
