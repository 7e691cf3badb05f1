//! `mixreg`: simulate data, fit coefficient priors, post-process estimates,
//! cross-validate the noise scale, run replicated experiments and export
//! plot data.
//!
//! Exit codes: 0 when every requested output was written, 1 on a runtime
//! failure, 2 on a usage error.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigFile, Usage};

#[derive(Parser, Debug)]
#[command(name = "mixreg", version, about = "Nonparametric estimation of coefficient priors in mixtures of linear regressions")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat key = value file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MIXREG_THREADS")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "MIXREG_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a simulated dataset and its true prior.
    Simulate(SimulateArgs),
    /// Fit a coefficient prior to a dataset.
    Fit(FitArgs),
    /// Turn a gridded fit into modes (mean shift) or ridge points (SCMS).
    Postprocess(PostprocessArgs),
    /// Select the noise scale by K-fold cross-validation.
    CvSigma(CvArgs),
    /// Replicate simulate, fit and score; write summary and bias tables.
    Experiment(ExperimentArgs),
    /// Export plot-ready CSVs and optionally an SVG figure.
    Plotdata(PlotArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Covariate columns, comma-separated (default: x0,x1).
    #[arg(long)]
    pub x_columns: Option<String>,
    /// Response column (default: y).
    #[arg(long)]
    pub y_column: Option<String>,
    /// Prepend a column of ones to the covariates.
    #[arg(long)]
    pub intercept: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GridArgs {
    /// Grid nodes per coefficient axis.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// The grid spans [-w, w] on every axis.
    #[arg(long)]
    pub half_width: Option<f64>,
    /// Iteration cap of the gridded EM.
    #[arg(long)]
    pub npmle_max_iter: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CvOptions {
    #[arg(long)]
    pub folds: Option<usize>,
    /// Explicit noise-scale candidates, comma-separated.
    #[arg(long)]
    pub sigma_grid: Option<String>,
    /// Number of log-spaced candidates when no explicit list is given.
    #[arg(long)]
    pub grid_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// sim1 (three lines) or sim2 (two circles).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Noise scale (default 0.5 for sim1, 0.2 for sim2).
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// npmle, npkmle or gem.
    #[arg(long)]
    pub method: Option<String>,
    /// Known noise scale.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Estimate the noise scale by cross-validation first.
    #[arg(long)]
    pub cv_sigma: bool,
    #[command(flatten)]
    pub cv: CvOptions,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Iteration cap of the chosen method (outer iterations for particle EM).
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Particle count (default: number of observations).
    #[arg(long)]
    pub particles: Option<usize>,
    /// Fixed kernel bandwidth instead of the oversmoothing rule.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Factor applied to the oversmoothing bandwidth.
    #[arg(long)]
    pub bandwidth_multiplier: Option<f64>,
    /// Particle start: npmle (sample of the gridded fit) or uniform.
    #[arg(long)]
    pub init: Option<String>,
}

#[derive(Args, Debug)]
pub struct PostprocessArgs {
    /// Grid density CSV written by `fit --method npmle`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Collapse the sample to the modes of its kernel estimate.
    #[arg(long, conflicts_with = "scms")]
    pub meanshift: bool,
    /// Project the sample onto the ridge of its kernel estimate.
    #[arg(long)]
    pub scms: bool,
    /// Points drawn from the grid density.
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub bandwidth_multiplier: Option<f64>,
    /// Ignore sample points farther than this many bandwidths.
    #[arg(long)]
    pub cutoff: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cv: CvOptions,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Only sim1 carries labels for scoring.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Mixing weights of the three lines, comma-separated.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// npmle, npmle-meanshift, npmle-scms, npkmle or gem.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub cv_sigma: bool,
    #[command(flatten)]
    pub cv: CvOptions,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Dataset CSV for the scatter and fitted lines.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Covariate column on the horizontal axis (default: x1).
    #[arg(long)]
    pub x_column: Option<String>,
    #[arg(long)]
    pub y_column: Option<String>,
    /// Atoms CSV (beta0, beta1, weight).
    #[arg(long)]
    pub atoms: Option<PathBuf>,
    /// Particles CSV (beta0, beta1).
    #[arg(long)]
    pub particles: Option<PathBuf>,
    /// Grid density CSV.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Also render plot.svg.
    #[arg(long)]
    pub svg: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.global.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let ctx = commands::Context::new(&cli.global, file)?;
    match cli.command {
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Postprocess(a) => commands::postprocess(&ctx, a),
        Command::CvSigma(a) => commands::cv_sigma(&ctx, a),
        Command::Experiment(a) => commands::experiment(&ctx, a),
        Command::Plotdata(a) => plot::plotdata(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
