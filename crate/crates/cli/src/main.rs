//! `countgpfa`: simulate, fit, infer, evaluate, export-hyper.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or I/O error, 4 numerical
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use countgpfa::ModelKind;

#[derive(Parser, Debug)]
#[command(name = "countgpfa", version, about = "Count GPFA with polynomial approximate log-likelihoods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset; writes counts.csv, truth.json, manifest.json.
    Simulate(SimulateArgs),
    /// Fit loadings and length scales; writes fit.json and hyperparameters.json.
    Fit(FitArgs),
    /// MAP latents and rates for a fit; writes x_map.csv and rates.csv.
    Infer(InferArgs),
    /// Score inferred latents against simulation truth; writes metrics.csv.
    Evaluate(EvaluateArgs),
    /// Write the hyperparameter record of a fit.
    ExportHyper(ExportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Binomial,
    Poisson,
    Negbinom,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Binomial => ModelKind::Binomial,
            Model::Poisson => ModelKind::Poisson,
            Model::Negbinom => ModelKind::NegBinomial,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub model: Model,
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative-binomial alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Binomial n shared by all neurons.
    #[arg(long)]
    pub n: Option<u32>,
    /// Override the preset's neuron count.
    #[arg(long)]
    pub neurons: Option<usize>,
    /// Override the preset's number of time bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Override the preset's number of trials.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long, value_enum)]
    pub model: Model,
    #[arg(long, default_value_t = 2)]
    pub latents: usize,
    /// Negative-binomial alpha (initial value with --optimize-alpha).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Binomial n shared by all neurons; default is each neuron's max count.
    #[arg(long)]
    pub n: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Learn the negative-binomial alpha as well.
    #[arg(long)]
    pub optimize_alpha: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub counts: PathBuf,
    /// fit.json or a hyperparameter record.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// truth.json written by `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Inferred latents (x_map.csv).
    #[arg(long)]
    pub inferred: PathBuf,
    /// Inferred rates (rates.csv); adds rate_mse to the metrics.
    #[arg(long)]
    pub rates: Option<PathBuf>,
    /// Also write curve.csv: error after refitting on the first N neurons.
    #[arg(long, value_delimiter = ',')]
    pub curve: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::ExportHyper(a) => commands::export_hyper(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
