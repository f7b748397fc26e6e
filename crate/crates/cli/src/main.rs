//! `qhconv` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "qhconv", version, about = "Quasi-hexagonal kernel CNN laboratory")]
pub struct Cli {
    /// key = value config file with [section] headers
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for internal parallelism
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Print the fully resolved configuration and exit
    #[arg(long, global = true)]
    pub print_config: bool,

    /// Output directory
    #[arg(long, global = true, env = "QHCONV_OUTPUT_ROOT")]
    pub out: Option<PathBuf>,

    /// Dataset root (CIFAR-10 binary batches)
    #[arg(long, global = true, env = "QHCONV_DATA_ROOT")]
    pub data_root: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load, subsample and preprocess a dataset
    Preprocess(PreprocessArgs),
    /// Train a preset model
    Train(TrainArgs),
    /// Test error of a checkpoint
    Eval(EvalArgs),
    /// Parameter and MAC accounting for the presets
    Params(ParamsArgs),
    /// Monte Carlo receptive-field coverage
    Rfsim(RfsimArgs),
    /// Render saliency maps and ROIs
    Saliency(SaliencyArgs),
    /// Generate occluded sets and a robustness table
    Occlude(OccludeArgs),
}

#[derive(Args, Debug, Default)]
pub struct PreprocessArgs {
    /// cifar10 or synth
    #[arg(long)]
    pub source: Option<String>,
    /// Class-balanced training subset size (0 keeps everything)
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Class-balanced test subset size (0 keeps everything)
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub gcn: Option<bool>,
    /// ZCA regulariser, or `none` to skip whitening
    #[arg(long)]
    pub zca_epsilon: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Directory written by `preprocess` (defaults to the output directory)
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Channel divisor; 1 is full width
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub pattern_seed: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub weight_decay_final: Option<f64>,
    /// Continue from the checkpoint already in the output directory
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct ParamsArgs {
    /// Comma-separated preset names
    #[arg(long)]
    pub presets: Option<String>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct RfsimArgs {
    /// Comma-separated depths
    #[arg(long)]
    pub depths: Option<String>,
    /// Configurations per depth
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated test image indices
    #[arg(long)]
    pub images: Option<String>,
    /// Feature layer; defaults to the last max-pool
    #[arg(long)]
    pub layer: Option<usize>,
    /// Number of top units
    #[arg(long)]
    pub omega: Option<usize>,
    /// ROI threshold as a fraction of the map maximum
    #[arg(long)]
    pub tau: Option<f64>,
    /// Class to explain: `label`, `pred` or an index
    #[arg(long)]
    pub class: Option<String>,
    /// png or ppm
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct OccludeArgs {
    /// Comma-separated checkpoints; every one is evaluated and filters the images
    #[arg(long)]
    pub checkpoints: Option<String>,
    /// Comma-separated subset of the checkpoints used to generate ROIs
    #[arg(long)]
    pub generators: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Images kept after filtering (0 keeps all)
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub top_k: Option<String>,
    #[arg(long)]
    pub fills: Option<String>,
    #[arg(long)]
    pub fractions: Option<String>,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<qhconv::Error>() {
            return match e {
                qhconv::Error::InvalidArgument(_) => 2,
                qhconv::Error::EngineFault(_) | qhconv::Error::Numerical(_) => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
