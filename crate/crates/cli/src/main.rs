mod commands;
mod outputs;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crtb::estimator::Method;
use crtb::numkernel::{LocationKind, RobustScaleKind};
use crtb::robustweights::PsiFamily;

#[derive(Parser)]
#[command(name = "crtb", version, about = "Cellwise robust twoblock regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write the artifact, a report and optional flag matrices.
    Fit(FitArgs),
    /// Predict responses for new predictor rows with a saved model.
    Predict(PredictArgs),
    /// Run the column-wise cell pre-filter and write binary flag matrices.
    Flag(FlagArgs),
    /// Cross-validate the sparsity (and optionally component) grid.
    Cv(CvArgs),
    /// Run a simulation preset or a scenario file.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Tb,
    TbSparse,
    Crtb,
    CrtbSparse,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Tb => Method::Tb,
            MethodArg::TbSparse => Method::TbSparse,
            MethodArg::Crtb => Method::Crtb,
            MethodArg::CrtbSparse => Method::CrtbSparse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum CenteringArg {
    Mean,
    Median,
}

impl From<CenteringArg> for LocationKind {
    fn from(c: CenteringArg) -> Self {
        match c {
            CenteringArg::Mean => LocationKind::Mean,
            CenteringArg::Median => LocationKind::Median,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScalingArg {
    Std,
    Mad,
    Tau2,
}

impl From<ScalingArg> for RobustScaleKind {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::Std => RobustScaleKind::Std,
            ScalingArg::Mad => RobustScaleKind::Mad,
            ScalingArg::Tau2 => RobustScaleKind::Tau2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PsiArg {
    Hampel,
    Huber,
    Fair,
}

impl From<PsiArg> for PsiFamily {
    fn from(p: PsiArg) -> Self {
        match p {
            PsiArg::Hampel => PsiFamily::Hampel,
            PsiArg::Huber => PsiFamily::Huber,
            PsiArg::Fair => PsiFamily::Fair,
        }
    }
}

/// Estimator settings shared by `fit` and `cv`.
#[derive(Args, Clone)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "crtb")]
    pub method: MethodArg,
    /// X components [default: min(3, p, n - 1)]
    #[arg(long)]
    pub kx: Option<usize>,
    /// Y components [default: min(3, q, n - 1)]
    #[arg(long)]
    pub ky: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub eta_x: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eta_y: f64,
    /// Location estimator [default: median for crtb methods, mean for tb]
    #[arg(long, value_enum)]
    pub centering: Option<CenteringArg>,
    /// Scale estimator [default: mad for crtb methods, std for tb]
    #[arg(long, value_enum)]
    pub scaling: Option<ScalingArg>,
    #[arg(long, default_value_t = 0.99)]
    pub alpha_cell: f64,
    #[arg(long, value_enum, default_value = "hampel")]
    pub psi: PsiArg,
    /// Cutoff probabilities a1,a2,a3
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.75, 0.90, 0.95])]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 25)]
    pub max_iter: usize,
}

#[derive(Args)]
pub struct FitArgs {
    /// Predictor table (CSV with header)
    #[arg(long)]
    pub x: PathBuf,
    /// Response table (CSV with header)
    #[arg(long)]
    pub y: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write per-cell flag matrices (robust methods only)
    #[arg(long)]
    pub flags: bool,
    /// Known outlying X cells (0/1 table) for detection metrics
    #[arg(long)]
    pub truth_x: Option<PathBuf>,
    /// Known outlying Y cells (0/1 table) for detection metrics
    #[arg(long)]
    pub truth_y: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct FlagArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    pub alpha_cell: f64,
    #[arg(long, value_enum, default_value = "median")]
    pub centering: CenteringArg,
    #[arg(long, value_enum, default_value = "mad")]
    pub scaling: ScalingArg,
    #[arg(long)]
    pub truth_x: Option<PathBuf>,
    #[arg(long)]
    pub truth_y: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct CvArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Sparsity grid, applied to both blocks
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    pub etas: Vec<f64>,
    /// Component grid as kx:ky pairs, e.g. 1:1,2:2 [default: --kx/--ky]
    #[arg(long, value_delimiter = ',')]
    pub components: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for the grid
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Preset name or path to a JSON scenario file
    pub scenario: String,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: available cores]
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Flag(a) => commands::flag(&a),
        Command::Cv(a) => commands::cv(&a),
        Command::Simulate(a) => commands::simulate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
