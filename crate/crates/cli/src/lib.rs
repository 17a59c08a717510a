//! Command-line driver: corpus generation, training, evaluation, gradient
//! checking and pooling inspection.
//!
//! Every command writes its human-readable summary to the supplied writer and
//! its artifacts under the configured output directory. Errors map to exit
//! codes through [`exit_code`].

use std::io::Write;
use std::path::PathBuf;

use adret::Error;
use clap::{Args, Parser, Subcommand};

pub mod artifacts;
mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_generate, cmd_gradcheck, cmd_inspect_pool, cmd_train};
pub use config::{ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "adret", version, about = "Adaptive pooling and adaptive negative sampling for cross-modal retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its ground truth.
    Generate(ExperimentArgs),
    /// Train both encoders and write the log, parameters and per-epoch metrics.
    Train(TrainArgs),
    /// Score trained parameters on the held-out split.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Print pooled output and the θ/δ/ω weights for one feature matrix as JSON.
    InspectPool(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// TOML experiment file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides both the corpus and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// hard-triplet, infonce-adaptive or infonce-fixed.
    #[arg(long)]
    pub loss: Option<String>,
    /// Negative count for infonce-fixed.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Parameter file; defaults to `<output_dir>/params.bin`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Average the similarity matrices of several parameter files.
    #[arg(long, num_args = 1.., conflicts_with = "params")]
    pub ensemble: Vec<PathBuf>,
    /// Reuse embeddings stored under `<output_dir>/cache`, keyed by parameter and corpus contents.
    #[arg(long)]
    pub cache_embeddings: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random draws per operation.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, default_value_t = adret::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Matrix file in the cache format; the first record is pooled.
    #[arg(long)]
    pub input: PathBuf,
    /// Pooling spec; defaults to the encoder's spec with `--params`, else `adpool`.
    #[arg(long)]
    pub spec: Option<String>,
    /// Trained parameters: the input is projected by that encoder and pooled with its weights.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Which encoder of `--params` to use.
    #[arg(long, default_value = "visual", value_parser = ["visual", "text"])]
    pub modality: String,
}

/// 0 success, 1 configuration, 2 data / format / I/O, 3 numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 1,
        Error::Dimension(_) | Error::Argument(_) | Error::Data(_) | Error::Format { .. } | Error::Io(_) => 2,
        Error::Evaluation(_) | Error::DegenerateVector { .. } | Error::Divergence { .. } => 3,
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> adret::Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(&load(a, Overrides::default())?, out),
        Command::Train(a) => {
            let o = Overrides { loss: a.loss.clone(), k: a.k, epochs: a.epochs, ..Overrides::default() };
            cmd_train(&load(&a.common, o)?, out)
        }
        Command::Eval(a) => {
            let cfg = load(&a.common, Overrides::default())?;
            let models = if !a.ensemble.is_empty() {
                a.ensemble.clone()
            } else {
                vec![a.params.clone().unwrap_or_else(|| cfg.output_dir.join("params.bin"))]
            };
            cmd_eval(&cfg, &models, a.cache_embeddings, out)
        }
        Command::Gradcheck(a) => cmd_gradcheck(a.seed, a.seeds, a.tolerance, out),
        Command::InspectPool(a) => cmd_inspect_pool(a, out),
    }
}

fn load(a: &ExperimentArgs, mut o: Overrides) -> adret::Result<ExperimentConfig> {
    o.seed = a.seed;
    o.output_dir = a.out.clone();
    ExperimentConfig::load(&a.config, &o)
}
