//! Command-line pipeline: dataset creation, tokenizer fitting, encoding,
//! training, generation, decoding, evaluation, the masking ablation and the
//! experiment recipes.
//!
//! Exit codes: 0 on success, 1 on a usage error (one-line message), 2 on a
//! runtime failure (diagnostic naming the failing file or field).

mod commands;
mod options;
pub mod recipes;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use options::{TrainFlags, THREADS_ENV};

const AFTER_HELP: &str = "Environment:\n  THREADS  worker threads for clip generation (default: available cores). \
Outputs do not depend on it.";

#[derive(Debug, Parser)]
#[command(name = "gridvid", version, about = "Grid-frame autoregressive video generation", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat `key = value` config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic class-conditional clips and a manifest.
    MakeData(MakeDataArgs),
    /// Fit the patch codebook on the grid images of a dataset.
    TrainVq(TrainVqArgs),
    /// Quantize clips into token files.
    Encode(EncodeArgs),
    /// Render a token file back into a clip.
    Decode(DecodeArgs),
    /// Train the autoregressive model on encoded tokens.
    TrainAr(TrainArArgs),
    /// Sample clips from a checkpoint.
    Generate(GenerateArgs),
    /// Score generated clips against real ones.
    Eval(EvalArgs),
    /// Train and score one model per masking threshold.
    Ablate(AblateArgs),
    /// Run a named experiment recipe (e2e-small, ablation-pmax, sgp-vs-reshape).
    Recipe(RecipeArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of classes [config: classes; default 3].
    #[arg(long)]
    pub classes: Option<usize>,
    /// Clips per class [config: per_class; default 50].
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Frames per clip [config: frames; default 16].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Square frame side in pixels [config: size; default 32].
    #[arg(long)]
    pub size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainVqArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of codewords [config: codebook_size; default 64].
    #[arg(long)]
    pub codebook_size: Option<usize>,
    /// Square patch side [config: patch; default 8].
    #[arg(long)]
    pub patch: Option<usize>,
    /// Lloyd iterations [config: iters; default 20].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output codebook file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Codebook file.
    #[arg(long)]
    pub codebook: PathBuf,
    /// Single clip to encode (output is one token file).
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub input: Option<PathBuf>,
    /// Dataset manifest to encode (output is a token directory).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Token order: grid or frame-major [config: order; default grid].
    #[arg(long)]
    pub order: Option<String>,
    /// Output token file or directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Token file.
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint supplying codebook, layout and order.
    #[arg(long, conflicts_with = "codebook", required_unless_present = "codebook")]
    pub ckpt: Option<PathBuf>,
    /// Codebook file (layout from --frames/--size/--order).
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Frames per clip [config: frames; default 16].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Square frame side in pixels [config: size; default 32].
    #[arg(long)]
    pub size: Option<usize>,
    /// Token order: grid or frame-major [config: order; default grid].
    #[arg(long)]
    pub order: Option<String>,
    /// Output clip file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Token directory written by `encode --data`.
    #[arg(long)]
    pub tokens: PathBuf,
    /// Codebook the tokens were encoded with.
    #[arg(long)]
    pub codebook: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory (model.ckpt, metrics.tsv, eval.tsv).
    #[arg(long)]
    pub out: PathBuf,
}

/// Sampling flags.
#[derive(Debug, Clone, Args)]
pub struct SampleFlags {
    /// Softmax temperature; below 1e-6 means greedy [config: temperature; default 1.0].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Keep the k most likely tokens, 1..=K [config: top_k; default K].
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sample: SampleFlags,
    /// Checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class to generate; every class when omitted [config: class].
    #[arg(long)]
    pub class: Option<usize>,
    /// Clips per generated class [config: num; default 8].
    #[arg(long)]
    pub num: Option<usize>,
    /// Output directory (clips plus manifest).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest of real clips.
    #[arg(long)]
    pub real: PathBuf,
    /// Manifest of generated clips (label = requested class).
    #[arg(long)]
    pub generated: PathBuf,
    /// Codebook used for the usage histogram and reconstruction PSNR.
    #[arg(long)]
    pub codebook: PathBuf,
    /// Report file; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub sample: SampleFlags,
    /// Token directory written by `encode --data`.
    #[arg(long)]
    pub tokens: PathBuf,
    /// Codebook the tokens were encoded with.
    #[arg(long)]
    pub codebook: PathBuf,
    /// Manifest of real clips for scoring.
    #[arg(long)]
    pub real: PathBuf,
    /// Comma-separated p_max values [config: grid; default 0,0.1,0.2,0.3,0.4].
    #[arg(long)]
    pub grid: Option<String>,
    /// Generated clips per class per arm [config: per_class; default 30].
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Output directory (one checkpoint per arm plus ablation.tsv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Recipe name.
    pub name: String,
    /// Override the recipe's training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Working directory; everything is written below it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of one invocation.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit 1.
    Usage(String),
    /// Failure while running; exit 2.
    Runtime(gridvid::Error),
}

impl From<gridvid::Error> for CliError {
    fn from(e: gridvid::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let full = e.to_string();
                    let line = full.lines().next().unwrap_or("invalid arguments");
                    eprintln!("{line} (see --help)");
                    1
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err}"),
            }
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::MakeData(a) => commands::make_data(a),
        Command::TrainVq(a) => commands::train_vq(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::TrainAr(a) => commands::train_ar(a),
        Command::Generate(a) => commands::generate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Recipe(a) => recipes::run_recipe(a),
    }
}
