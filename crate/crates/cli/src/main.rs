//! `mtwin`: batch front end for the membrane shape-sensor twin.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use membrane_twin::model::ModelError;
use membrane_twin::Error;
use serde::Serialize;

use config::ConfigFile;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const DIVERGED: u8 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Diverged(_) => exit::DIVERGED,
            CliError::Other(_) => exit::OTHER,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Model(m) => m.into(),
            Error::Importance(i) => i.into(),
            Error::Io { .. } => CliError::Other(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } => CliError::Diverged(e.to_string()),
            ModelError::InvalidArch(_) | ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<membrane_twin::importance::ImportanceError> for CliError {
    fn from(e: membrane_twin::importance::ImportanceError) -> Self {
        use membrane_twin::importance::ImportanceError as E;
        match e {
            E::Model(m) => m.into(),
            E::InvalidSettings(_) | E::KOutOfRange { .. } | E::TooManyGroups(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mtwin",
    version,
    about = "Software twin of an optical-waveguide membrane shape sensor"
)]
pub struct Cli {
    /// Versioned JSON config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataFlags),
    /// Train the point-cloud autoencoder (Stage 1).
    TrainAe(TrainAeFlags),
    /// Train the PD-to-latent regressor on a frozen autoencoder (Stage 2).
    TrainMlp(TrainMlpFlags),
    /// Evaluate a trained pipeline: per-bin statistics and NN error maps.
    Eval(EvalFlags),
    /// Grid search over latent size and predicted point count.
    Sweep(SweepFlags),
    /// Grouped SAGE values for LEDs and PDs.
    Sage(SageFlags),
    /// Progressive feature inclusion ordered by SAGE values.
    Ablate(AblateFlags),
    /// PD response against wall angle for an aligned and a transverse pair.
    BendCharacterize(BendFlags),
    /// Export truth and predicted clouds as PLY and CSV.
    Export(ExportFlags),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataFlags {
    #[arg(long)]
    pub samples: Option<usize>,
    /// Field grid resolution per side.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Stride of the truth cloud over the field grid.
    #[arg(long)]
    pub truth_stride: Option<usize>,
    /// Read noise on or off.
    #[arg(long)]
    pub noise: Option<bool>,
    /// Indenter families to mix (sphere, cylinder, cube, triangular_prism, u_shape).
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<String>>,
    #[arg(long)]
    pub flat_fraction: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// LED/PD layout JSON (defaults to the built-in layout).
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Optics parameter JSON.
    #[arg(long)]
    pub optics: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainAeFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Latent size L.
    #[arg(long)]
    pub latent: Option<usize>,
    /// Predicted points M_pr.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainMlpFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stage 1 checkpoint (defaults to `<out>/autoencoder.ckpt`).
    #[arg(long)]
    pub autoencoder: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory with autoencoder.ckpt, regressor.ckpt and norm_stats.json.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Samples to evaluate: all, train or val.
    #[arg(long)]
    pub split: Option<String>,
    /// Write one NN error map per sample.
    #[arg(long)]
    pub nn_maps: Option<bool>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset (defaults to the validation split of `--data`).
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub latents: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub points: Option<Vec<usize>>,
    #[arg(long)]
    pub ae_epochs: Option<usize>,
    #[arg(long)]
    pub mlp_epochs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SageFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Evaluation dataset (defaults to the validation split of `--data`).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Partitions to analyze: led, pd or both.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub permutations: Option<usize>,
    /// Enumerate every permutation (at most 8 groups).
    #[arg(long)]
    pub exhaustive: Option<bool>,
    /// Background draws per evaluation sample.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Background rows taken from the training split.
    #[arg(long)]
    pub background: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// SAGE report written by `sage` (sage.json).
    #[arg(long)]
    pub sage: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<String>,
    /// Orders to run: sage_desc, sage_asc, natural.
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<String>>,
    /// Group counts K (defaults to every K).
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct BendFlags {
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub angles: Option<Vec<f64>>,
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long)]
    pub optics: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained model directory; adds predictions and NN errors.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    let jobs = cli.jobs.or(file.as_ref().and_then(|f| f.jobs));
    if jobs == Some(0) {
        return Err(CliError::Config("--jobs must be positive".into()));
    }
    if let Some(n) = jobs {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = commands::Context {
        seed: cli.seed.or(file.as_ref().and_then(|f| f.seed)).unwrap_or(0),
        jobs,
        out: cli
            .out
            .or(file.as_ref().and_then(|f| f.out.clone()))
            .unwrap_or_else(|| PathBuf::from("out")),
        file,
    };
    match &cli.command {
        Command::GenData(f) => commands::gen_data(&ctx, f),
        Command::TrainAe(f) => commands::train_ae(&ctx, f),
        Command::TrainMlp(f) => commands::train_mlp(&ctx, f),
        Command::Eval(f) => commands::eval(&ctx, f),
        Command::Sweep(f) => commands::sweep(&ctx, f),
        Command::Sage(f) => commands::sage(&ctx, f),
        Command::Ablate(f) => commands::ablate(&ctx, f),
        Command::BendCharacterize(f) => commands::bend_characterize(&ctx, f),
        Command::Export(f) => commands::export(&ctx, f),
    }
}
