//! `featdyn` command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use featdyn_core::config::{DataSpec, MNIST_DIR_ENV, OUTPUT_ROOT_ENV};
use featdyn_core::objectives::ddpm::Fault;
use featdyn_core::objectives::gradcheck::{run_gradcheck, GradcheckConfig};
use featdyn_core::plot::{line_chart_svg, series_from_csv, write_svg, ChartOptions};
use featdyn_core::{run_experiment, run_sweep, Error, ExperimentSpec, StopReason, SweepSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "featdyn", version, about = "Feature-learning dynamics laboratory")]
pub struct Cli {
    /// Root directory for relative output paths.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "out")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a single experiment spec.
    Run {
        spec: PathBuf,
        /// Directory holding the MNIST IDX files (overrides the spec).
        #[arg(long, env = MNIST_DIR_ENV)]
        mnist_dir: Option<PathBuf>,
    },
    /// Run an SNR sweep.
    Sweep {
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check analytic gradients and the closed-form loss against oracles.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 20)]
        mc_instances: usize,
        #[arg(long, default_value_t = 200_000)]
        mc_draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for gradcheck.csv (default: <out-root>/gradcheck).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Render columns of a CSV file as an SVG line chart.
    Plot {
        csv: PathBuf,
        /// Comma-separated y columns.
        #[arg(long, value_delimiter = ',', required = true)]
        cols: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "iter")]
        x: String,
        #[arg(long)]
        logx: bool,
        #[arg(long)]
        logy: bool,
        #[arg(long)]
        title: Option<String>,
    },
}

/// Numeric failures exit 3; everything else (bad specs, unreadable inputs,
/// malformed files) is treated as a configuration problem.
fn exit_for(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Singular(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_for(e)
}

fn cmd_run(spec_path: &Path, mnist_dir: Option<PathBuf>, root: &Path) -> i32 {
    let mut spec = match ExperimentSpec::load(spec_path) {
        Ok(s) => s,
        Err(e) => return report(&e),
    };
    if let (DataSpec::Mnist(m), Some(dir)) = (&mut spec.data, mnist_dir) {
        m.dir = Some(dir);
    }
    let out = spec.resolve_output(root);
    match run_experiment(&spec, &out) {
        Ok(s) => {
            println!(
                "{}: {} after {} iters, loss {:.6e}, phase {}, outputs in {}",
                s.name,
                s.stop_reason,
                s.iter,
                s.loss,
                s.phase,
                out.display()
            );
            if s.stop_reason == StopReason::NonFinite {
                eprintln!("error: training produced non-finite values at iteration {}", s.iter);
                EXIT_NUMERIC
            } else {
                EXIT_OK
            }
        }
        Err(e) => report(&e),
    }
}

fn cmd_sweep(spec_path: &Path, jobs: usize, root: &Path) -> i32 {
    let spec = match SweepSpec::load(spec_path) {
        Ok(s) => s,
        Err(e) => return report(&e),
    };
    let out = spec.resolve_output(root);
    match run_sweep(&spec, &out, jobs) {
        Ok(rows) => {
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} cells, {} failed, table in {}", rows.len(), failed, out.join("ratio_vs_nsnr2.csv").display());
            for r in rows.iter().filter_map(|r| r.outcome.as_ref().err().map(|e| (r, e))) {
                eprintln!("cell {} mu={} seed={} failed: {}", r.0.model, r.0.mu_norm, r.0.seed, r.1);
            }
            let nonfinite = rows
                .iter()
                .any(|r| matches!(&r.outcome, Ok(s) if s.stop_reason == StopReason::NonFinite));
            if failed > 0 || nonfinite {
                EXIT_NUMERIC
            } else {
                EXIT_OK
            }
        }
        Err(e) => report(&e),
    }
}

fn cmd_gradcheck(cfg: &GradcheckConfig, out: &Path) -> i32 {
    let report_ = match run_gradcheck(cfg) {
        Ok(r) => r,
        Err(e) => return report(&e),
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: {}: {e}", out.display());
        return EXIT_CONFIG;
    }
    let path = out.join("gradcheck.csv");
    if let Err(e) = report_.write_csv(&path) {
        return report(&e);
    }
    println!(
        "classifier max rel err {:.3e}, ddpm max rel err {:.3e}, mc max |z| {:.2} ({})",
        report_.max_classifier_err,
        report_.max_ddpm_err,
        report_.max_mc_sigmas,
        path.display()
    );
    if report_.passed {
        EXIT_OK
    } else {
        eprintln!("gradient check failed; worst coordinates:");
        eprintln!("instance,check,coordinate,analytic,fd,rel_err");
        for r in report_.worst(10, cfg) {
            eprintln!("{},{:?},{},{:e},{:e},{:e}", r.instance, r.check, r.coordinate, r.analytic, r.fd, r.rel_err);
        }
        EXIT_CHECK
    }
}

fn cmd_plot(csv: &Path, cols: &[String], x: &str, out: &Path, opts: ChartOptions) -> i32 {
    let ycols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let svg = series_from_csv(csv, x, &ycols).and_then(|s| line_chart_svg(&s, &opts));
    match svg.and_then(|svg| write_svg(out, &svg)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

/// Execute a parsed command line and return the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let root = cli.out_root;
    match cli.command {
        Command::Run { spec, mnist_dir } => cmd_run(&spec, mnist_dir, &root),
        Command::Sweep { spec, jobs } => cmd_sweep(&spec, jobs, &root),
        Command::Gradcheck {
            instances,
            mc_instances,
            mc_draws,
            seed,
            out,
            inject_fault,
        } => {
            let cfg = GradcheckConfig {
                instances,
                mc_instances,
                mc_draws,
                seed,
                fault: inject_fault.then_some(Fault::FlipSingleNeuronCrossTerm),
                ..Default::default()
            };
            cmd_gradcheck(&cfg, &out.unwrap_or_else(|| root.join("gradcheck")))
        }
        Command::Plot {
            csv,
            cols,
            out,
            x,
            logx,
            logy,
            title,
        } => {
            let opts = ChartOptions {
                title: title.unwrap_or_else(|| csv.display().to_string()),
                x_label: x.clone(),
                y_label: cols.join(", "),
                log_x: logx,
                log_y: logy,
                ..Default::default()
            };
            cmd_plot(&csv, &cols, &x, &out, opts)
        }
    }
}

/// Parse `args` (including the program name) and execute. Argument errors
/// map to exit code 2; `--help` and `--version` to 0.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}
