//! `spnet`: dataset preparation, training, evaluation, paradigm comparison,
//! energy profiling and gradient histograms from the command line.
//!
//! Every command prints JSON lines on stdout, the first being its resolved
//! configuration. Exit codes: 0 success, 1 usage or configuration error,
//! 2 data error, 3 training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use spnet::data::DataError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] spnet::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        use spnet::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::NonFiniteGradient(_) => 3,
                E::Data(_) | E::Io { .. } | E::Checkpoint(_) => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "spnet", version, about = "Spiking point-cloud classifier experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a ModelNet-style directory tree into train/test caches.
    Prepare(PrepareArgs),
    /// Generate the synthetic shape dataset as train/test caches.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint and epoch log.
    Train(TrainArgs),
    /// Score a checkpoint with multi-step ensemble inference.
    Eval(EvalArgs),
    /// Train and score the three training regimes side by side.
    Compare(CompareArgs),
    /// Count operations and estimate energy for a checkpoint.
    Profile(ProfileArgs),
    /// First-layer gradient histograms over a grid of surrogate slopes and time steps.
    Gradhist(GradhistArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Ann,
    Snn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Debug, Serialize)]
pub struct PrepareArgs {
    /// Root holding one directory per class, each with train/ and test/.
    #[arg(long)]
    pub data_root: PathBuf,
    /// Output directory for train.cache, test.cache and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Abort on the first unreadable or malformed mesh.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Comma-separated subset of sphere, cube, pyramid, torus.
    #[arg(long, value_delimiter = ',', default_value = "sphere,cube,pyramid,torus")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 250)]
    pub per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Config file plus the overrides shared by the experiment commands.
#[derive(Args, Debug, Serialize)]
pub struct ExperimentArgs {
    /// JSON run configuration; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_cache: Option<PathBuf>,
    #[arg(long)]
    pub test_cache: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Seeds initialization, shuffling, augmentation, dropout and perturbation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Surrogate slope k.
    #[arg(long)]
    pub slope: Option<f64>,
    /// Comma-separated widths of the shared per-point layers.
    #[arg(long, value_delimiter = ',')]
    pub point_widths: Option<Vec<usize>>,
    /// Comma-separated head widths; give the flag no value for no head.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub head_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long)]
    pub t_train: Option<usize>,
    /// Horizon of the post-training evaluation.
    #[arg(long)]
    pub t_eval: Option<usize>,
    /// Random initial membrane potential during training.
    #[arg(long, value_enum)]
    pub mpp: Option<Switch>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub t_eval: usize,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Number of consecutive seeds; cells report the median over seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub multi_steps: Option<usize>,
    #[arg(long)]
    pub max_eval_steps: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct ProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub t_eval: usize,
    /// Profile only the first N clouds.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    /// Cost batch norm separately instead of folding it into the weights.
    #[arg(long)]
    pub unfolded_norm: bool,
    #[arg(long, default_value_t = 4.6)]
    pub e_mac_pj: f64,
    #[arg(long, default_value_t = 0.9)]
    pub e_ac_pj: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct GradhistArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Comma-separated surrogate slopes.
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Option<Vec<f64>>,
    /// Comma-separated time-step counts.
    #[arg(long = "t", value_delimiter = ',')]
    pub time_steps: Option<Vec<usize>>,
    #[arg(long)]
    pub samples: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Profile(a) => commands::profile(&a),
        Command::Gradhist(a) => commands::gradhist(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
