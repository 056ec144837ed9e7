//! `m2mx`: corpus synthesis, mashup generation, training, evaluation and
//! projection from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m2mx_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Divergence { .. } | Error::ZeroVector => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "m2mx", version, about = "Cross-domain singer embeddings: monophonic vocals to mixed tracks")]
struct Cli {
    /// Key–value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to M2MX_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic corpus of vocal and background tracks.
    Synth(SynthArgs),
    /// Pair vocal segments with compatible backgrounds.
    Mashup(MashupArgs),
    /// Train a MONO, MIXED or CROSS embedding model.
    Train(TrainArgs),
    /// Singer identification and query-by-singer metrics.
    Eval(EvalArgs),
    /// 2-D t-SNE map of track vectors in both domains.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub singers: Option<usize>,
    /// Tracks per singer.
    #[arg(long)]
    pub tracks: Option<usize>,
    #[arg(long)]
    pub test_singers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vocal_seconds: Option<f64>,
    #[arg(long)]
    pub background_seconds: Option<f64>,
    /// Distinct (tempo, key) styles.
    #[arg(long)]
    pub styles: Option<usize>,
    #[arg(long)]
    pub backgrounds_per_style: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct MixArgs {
    /// Tempo tolerance in BPM.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Backgrounds drawn per vocal segment.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Mashup SNR in dB.
    #[arg(long = "mix-snr", allow_negative_numbers = true)]
    pub mix_snr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MashupArgs {
    /// Corpus directory or manifest providing the vocals.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Corpus providing the backgrounds (default: --corpus).
    #[arg(long)]
    pub backgrounds: Option<PathBuf>,
    #[command(flatten)]
    pub mix: MixArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write every mashup as a WAV.
    #[arg(long)]
    pub render: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Mashup manifest (default: generated from the corpus).
    #[arg(long)]
    pub mashups: Option<PathBuf>,
    #[command(flatten)]
    pub mix: MixArgs,
    /// mono, mixed or cross.
    #[arg(long)]
    pub mode: Option<String>,
    /// Start from a 30-epoch singer classifier.
    #[arg(long)]
    pub pretrain: bool,
    /// Metric-learning epochs (early stopping may end sooner).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub pretrain_batch: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Keep the hardest negatives of a larger random pool.
    #[arg(long)]
    pub hard_negatives: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[arg(long)]
    pub model_tracks: Option<usize>,
    #[arg(long)]
    pub query_tracks: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model (or GMM baseline) checkpoint.
    #[arg(long, conflicts_with = "gmm")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the GMM-UBM baseline trained on the corpus's train split.
    #[arg(long)]
    pub gmm: bool,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// mono2mono, mix2mix or mono2mix.
    #[arg(long, conflicts_with = "all_scenarios")]
    pub scenario: Option<String>,
    #[arg(long)]
    pub all_scenarios: bool,
    /// Comma-separated evaluation SNRs in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<String>,
    /// Evaluation split.
    #[arg(long)]
    pub split: Option<String>,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub relevance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub singers: Option<usize>,
    /// Tracks per singer; each appears monophonic and mixed.
    #[arg(long)]
    pub tracks: Option<usize>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// `--threads`, then the config file's `threads`, then M2MX_THREADS; 0
/// (the default) lets rayon use every core.
fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("M2MX_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("M2MX_THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Mashup(_) => "mashup",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Project(_) => "project",
    };
    let mut settings = config::Settings::new(name, cli.config.as_deref())?;
    let threads = thread_count(cli.threads.or(settings.execution_key("threads")?))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::config(format!("cannot start {threads} threads: {e}")))?;
    let base = settings.location("out", cli.out, "runs")?;
    match cli.command {
        Command::Synth(a) => commands::synth(a, settings, &base),
        Command::Mashup(a) => commands::mashup(a, settings, &base),
        Command::Train(a) => commands::train(a, settings, &base),
        Command::Eval(a) => commands::eval(a, settings, &base),
        Command::Project(a) => commands::project(a, settings, &base),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
