//! `sla`: masks, training and analysis artifacts from the command line.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sla_core::model::AttentionMode;


#[derive(Parser)]
#[command(name = "sla", version, about = "Syntax-aware local attention toolkit", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export one sentence's local attention mask as allow-bit CSV plus a JSON sidecar.
    Mask(MaskArgs),
    /// Run the encoder on every sentence of a CoNLL-U file.
    Forward(ForwardArgs),
    /// Train on a JSON-lines dataset; writes the best-dev checkpoint and metric history.
    Train(TrainArgs),
    /// Score a checkpoint on a JSON-lines dataset.
    Eval(EvalArgs),
    /// Compare backprop gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Per-layer mean gate over the content tokens of a dataset.
    GateStats(AnalysisArgs),
    /// Mixed attention averaged over heads and layers for one input.
    Heatmap(HeatmapArgs),
    /// Write a seeded synthetic token-labeling dataset.
    Synth(SynthArgs),
}

/// Model and masking settings shared by every model-backed subcommand.
/// Flags override values read from `--config`.
#[derive(Args, Clone, Default)]
pub struct ModelFlags {
    /// JSON file with model, masking and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary file, one subword per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Syntax threshold.
    #[arg(long)]
    pub m: Option<u32>,
    /// Window half-width.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub lowercase: bool,
    /// Threshold D(key, query) instead of D(query, key).
    #[arg(long)]
    pub transpose_d: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Sla,
    Window,
    GlobalOnly,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sla => AttentionMode::Sla,
            ModeArg::Window => AttentionMode::Window,
            ModeArg::GlobalOnly => AttentionMode::GlobalOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MaskModeArg {
    Sla,
    Window,
    Pair,
}

#[derive(Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub conllu: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sla")]
    pub mode: MaskModeArg,
    #[arg(long)]
    pub m: Option<u32>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub transpose_d: bool,
    /// Index of the sentence in the file; `pair` uses it and the next one.
    #[arg(long, default_value_t = 0)]
    pub sentence: usize,
    /// Accepted for uniformity; masks involve no randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub conllu: PathBuf,
    /// Checkpoint directory; without it a freshly initialised model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub num_labels: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Coordinates checked per tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Uniform noise added to every parameter before checking.
    #[arg(long, default_value_t = 0.05)]
    pub perturb: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalysisArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines dataset (labels ignored).
    #[arg(long, conflicts_with = "conllu", required_unless_present = "conllu")]
    pub data: Option<PathBuf>,
    /// CoNLL-U file; each sentence is one input.
    #[arg(long)]
    pub conllu: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Which input to render.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub dev: usize,
    /// Label radius in tree edges.
    #[arg(long, default_value_t = 3)]
    pub radius: u32,
    #[arg(long)]
    pub min_words: Option<usize>,
    #[arg(long)]
    pub max_words: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Mask(a) => commands::mask(a),
        Command::Forward(a) => commands::forward(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::GateStats(a) => commands::gate_stats(a),
        Command::Heatmap(a) => commands::heatmap(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
