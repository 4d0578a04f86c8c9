//! `bip`: pretraining, bandit training, evaluation and the session server.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "bip", version, about = "Entropy-gated interactive bandit training for translation models")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice (model init, sampling, data, shuffling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised pretraining of an actor checkpoint.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Online bandit training with entropy-gated feedback requests.
    Train(TrainArgs),
    /// Same loop with one request per input on the complete hypothesis.
    Baseline(TrainArgs),
    /// Greedy decoding scored by average sentence chrF and corpus BLEU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test source and reference files; defaults to the synthetic test split.
        #[arg(long, num_args = 2, value_names = ["SRC", "REF"])]
        test: Option<Vec<PathBuf>>,
    },
    /// Sentence chrF of hypothesis lines against reference lines.
    Chrf {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Score each line as a partial translation against a truncated reference.
        #[arg(long)]
        partial: bool,
    },
    /// HTTP and WebSocket server for human-rated sessions.
    Serve(ServeArgs),
    /// Write the synthetic splits of the configuration as text files.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeedbackArg {
    Simulated,
    Human,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub feedback: Option<FeedbackArg>,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub mu: Option<f64>,
    /// Stream source and reference files; defaults to the synthetic stream.
    #[arg(long, num_args = 2, value_names = ["SRC", "REF"])]
    pub stream: Option<Vec<PathBuf>>,
    /// Where the trained checkpoint goes.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for entropy_trace.csv, requests.csv and episodes.jsonl.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Checkpoint directory; its directory name is the checkpoint id. Repeatable.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Source file, optionally followed by a reference file for simulated sessions.
    #[arg(long, num_args = 1..=2, value_names = ["SRC", "REF"], required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub mu: Option<f64>,
    /// Inactivity timeout in seconds while a request waits for a rating.
    #[arg(long, default_value_t = 600)]
    pub timeout_secs: u64,
    /// Per-session episodes.jsonl and final checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bip_core::Error),
    #[error("{0}")]
    Runtime(String),
}

fn init_logging() {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .flatten_event(true)
        .with_current_span(false)
        .with_target(false)
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            tracing::error!(event = "failed", error = %e);
            ExitCode::from(2)
        }
    }
}
