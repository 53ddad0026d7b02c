//! `tendon`: batch driver for fidelity selection and mixed-effects fitting.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 non-convergence (outputs are still written).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "tendon", version, about = "Two-stage Bayesian inference for tendon stress–strain data")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Use the chain lengths of the original study.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// How to read the reported noise value 0.15.
    #[arg(long, global = true, value_parser = ["variance", "std-dev"])]
    noise_convention: Option<String>,
    /// Observation noise standard deviation in MPa; overrides --noise-convention.
    #[arg(long, global = true)]
    sigma_obs: Option<f64>,
    /// Tendon type assigned to every input (SDFT or CDET).
    #[arg(long, global = true)]
    tendon_type: Option<String>,
    /// Unit of `strain` input columns.
    #[arg(long, global = true, value_parser = ["fraction", "percent"])]
    strain_unit: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Infer per-observation fidelities for each experiment.
    Select(SelectArgs),
    /// Truncate experiments at the first fidelity mean below the threshold.
    Trim(TrimArgs),
    /// Fit the mixed-effects population model with NUTS.
    FitPop(FitPopArgs),
    /// Posterior predictive densities, stress bands and the linear-modulus comparison.
    Predict(PredictArgs),
    /// Generate a synthetic population.
    Synth(SynthArgs),
    /// Convergence diagnostics for a set of chain files.
    Diagnose(DiagnoseArgs),
    /// Observation noise from low-strain data.
    EstimateSigma(EstimateSigmaArgs),
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Experiment CSV files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Fidelity threshold used for the reported truncation point.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrimArgs {
    /// Experiment CSV files given to `select`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory of `select`.
    #[arg(long)]
    pub selection: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitPopArgs {
    /// Trimmed experiment CSV files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Accept experiments without fidelity weights (all weights 1).
    #[arg(long)]
    pub no_selection: bool,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub adapt_delta: Option<f64>,
    #[arg(long)]
    pub max_tree_depth: Option<usize>,
    #[arg(long, value_parser = ["centered", "non-centered"])]
    pub parameterization: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Output directory of `fit-pop`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Posterior draws used for the predictive parameter distribution.
    #[arg(long, default_value_t = 4000)]
    pub draws: usize,
    /// Points in each density grid.
    #[arg(long, default_value_t = 512)]
    pub grid_points: usize,
    /// Points in each stress band.
    #[arg(long, default_value_t = 100)]
    pub band_points: usize,
    /// `trim` manifest enabling the linear-modulus comparison.
    #[arg(long)]
    pub trim_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub n_experiments: usize,
    #[arg(long, default_value_t = 0.1)]
    pub max_strain: f64,
    #[arg(long, default_value_t = 101)]
    pub points: usize,
    /// Population mean of ξ = [ν, η, τ, ρ] (default: prior means).
    #[arg(long, num_args = 4, value_delimiter = ',')]
    pub mu_pop: Option<Vec<f64>>,
    /// Population standard deviations of ξ.
    #[arg(long, num_args = 4, value_delimiter = ',', default_values_t = [0.3, 0.15, 0.2, 0.2])]
    pub sd: Vec<f64>,
    /// Additive noise standard deviation (default: σ_obs).
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Damage onset as a strain beyond each tendon's `b`.
    #[arg(long)]
    pub damage_offset: Option<f64>,
    /// Gradient factor after damage onset.
    #[arg(long, default_value_t = 0.5)]
    pub softening: f64,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Chain CSV files of one run.
    #[arg(required = true)]
    pub chains: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.05)]
    pub rhat_threshold: f64,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateSigmaArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    pub max_strain: f64,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    NotConverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::NotConverged(_) => 3,
        }
    }
}

impl From<tendon_core::Error> for Failure {
    fn from(e: tendon_core::Error) -> Self {
        match e {
            tendon_core::Error::Config(_) => Failure::Usage(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

pub type Outcome = Result<(), Failure>;

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if cli.paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(n) = &cli.noise_convention {
        cfg.noise_convention = n.parse()?;
        cfg.sigma_obs = None;
    }
    if let Some(s) = cli.sigma_obs {
        if !(s.is_finite() && s > 0.0) {
            return Err(Failure::Usage(anyhow::anyhow!("--sigma-obs must be positive, got {s}")));
        }
        cfg.sigma_obs = Some(s);
    }
    if let Some(t) = &cli.tendon_type {
        cfg.tendon_type = Some(t.parse().map_err(|e: tendon_core::Error| Failure::Usage(e.into()))?);
    }
    if let Some(u) = &cli.strain_unit {
        cfg.strain_unit = match u.as_str() {
            "percent" => tendon_core::dataio::StrainUnit::Percent,
            _ => tendon_core::dataio::StrainUnit::Fraction,
        };
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = resolve(&cli)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    let force = cli.force;
    match cli.command {
        Command::Select(a) => commands::select(&mut cfg, &a, force),
        Command::Trim(a) => commands::trim(&mut cfg, &a, force),
        Command::FitPop(a) => commands::fit_pop(&mut cfg, &a, force),
        Command::Predict(a) => commands::predict(&cfg, &a, force),
        Command::Synth(a) => commands::synth(&cfg, &a, force),
        Command::Diagnose(a) => commands::diagnose(&a, force),
        Command::EstimateSigma(a) => commands::estimate_sigma(&cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) | Failure::Data(e) => eprintln!("error: {e:#}"),
                Failure::NotConverged(msg) => eprintln!("not converged: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
