//! `mslm` command line: train, eval, analyze, bench and hpo.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{preset, RunConfig, PRESETS};

pub const OUTPUT_ROOT_ENV: &str = "MSLM_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "mslm", version, about = "Recurrent language models on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a preset or JSON config.
    Train(TrainArgs),
    /// Score a split with a saved checkpoint.
    Eval(EvalArgs),
    /// Confusion curves from a saved checkpoint.
    Analyze(AnalyzeArgs),
    /// Time LSTM against QRNN stacks.
    Bench(BenchArgs),
    /// Random hyperparameter study with forest importance.
    Hpo(HpoArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Preset name (ptb-char, enwik8, wt103, fixture, fixture-bytes, fixture-words).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON run config. Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shorthand for `--preset fixture`.
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    pub fixture: bool,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub train: Option<String>,
    #[arg(long)]
    pub valid: Option<String>,
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub granularity: Option<String>,
    #[arg(long)]
    pub cell: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub emb_size: Option<usize>,
    /// Embedding, hidden, input and output dropout, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub dropout: Option<Vec<f64>>,
    #[arg(long)]
    pub weight_drop: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub bptt: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs at which the learning rate is divided by 10.
    #[arg(long, value_delimiter = ',')]
    pub lr_drops: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub cutoffs: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; the run directory is `<out>/<name>`. Falls back to the
    /// config's `output_dir`, then `MSLM_OUTPUT_ROOT`, then `runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the run directory's `last.ckpt`.
    #[arg(long)]
    pub resume: bool,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// File path or `fixture:<name>`.
    #[arg(long)]
    pub data: String,
    /// Expected granularity of the data; must match the checkpoint.
    #[arg(long)]
    pub granularity: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub bptt: usize,
    /// Append a metrics row to this CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    CharPos,
    WordPos,
    WordLen,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long, value_enum)]
    pub analysis: Analysis,
    #[arg(long, default_value = "The")]
    pub anchor: String,
    #[arg(long, default_value_t = 10)]
    pub max_position: usize,
    #[arg(long, default_value_t = 200)]
    pub bptt: usize,
    /// Output directory; defaults to `<output root>/analysis`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Timed repetitions per measurement, after 3 discarded warmups.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Shapes as `batch,seq,hidden,layers`; replaces the default grid.
    #[arg(long = "shape")]
    pub shapes: Vec<String>,
    /// CSV path; defaults to `<output root>/bench.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HpoArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 2018)]
    pub seed: u64,
    /// Training corpus (path or `fixture:<name>`), character level.
    #[arg(long, default_value = "fixture:char_ptb_10k")]
    pub train: String,
    #[arg(long, default_value = "fixture:char_ptb_valid")]
    pub valid: String,
    /// Use the full 300-epoch protocol instead of the desk-scale one.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue a study whose record file already exists.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many new trials (the study can be resumed later).
    #[arg(long)]
    pub max_new_trials: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub grid: usize,
    #[arg(long)]
    pub sequential: bool,
    /// Study directory; defaults to `<output root>/hpo`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
    pub const COMPATIBILITY: u8 = 5;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(mslm::Error),
}

impl From<mslm::Error> for CliError {
    fn from(e: mslm::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(mslm::Error::Anchor { anchor, nearest }) => {
                write!(f, "anchor {anchor:?} is not in the vocabulary; nearest entries: {}", nearest.join(", "))
            }
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use mslm::Error::*;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Core(e) => match e {
                Anchor { .. } | Naming(_) | Domain(_) | Bounds(_) | Ordering(_) => exit::USAGE,
                Divergence { .. } => exit::DIVERGENCE,
                Compatibility(_) | Vocabulary { .. } => exit::COMPATIBILITY,
                _ => exit::DATA,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Output root: explicit flag, then the environment, then `runs`.
pub fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Bench(a) => commands::bench(a),
        Command::Hpo(a) => commands::hpo(a),
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("mslm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
