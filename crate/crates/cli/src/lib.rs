//! Pipeline front end over the core crate: every experiment stage, from
//! corpus ingestion to the final report bundle, behind one binary.
//!
//! Exit codes are part of the interface: 0 success, 1 usage error,
//! 2 validation error, 3 transport or judge failure, 4 replay mismatch.

pub mod commands;
pub mod fixtures;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use deliberata_core::agents::AgentsError;
use deliberata_core::inference::FitError;
use deliberata_core::prompts::PromptError;
use deliberata_core::protocol::{DeliberationFormat, EngineError, GoalVariant};
use deliberata_core::store::StoreError;
use deliberata_core::values::ValueError;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Transport(_) => EXIT_TRANSPORT,
            CliError::Mismatch(_) => EXIT_MISMATCH,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<ValueError> for CliError {
    fn from(e: ValueError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<AgentsError> for CliError {
    fn from(e: AgentsError) -> CliError {
        // A key named in the roster but absent from the environment is a
        // runtime endpoint problem, not a flag mistake.
        match e {
            AgentsError::MissingApiKey(_) => CliError::Transport(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Globals {
    /// Master seed; fixes all stochastic behavior downstream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Maximum number of transcripts deliberated concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub parallel: usize,
    /// Agent roster file.
    #[arg(long, global = true, default_value = "agents.toml")]
    pub config: PathBuf,
}

#[derive(Debug, Parser)]
#[command(
    name = "deliberata",
    version,
    about = "Run and analyze multi-agent deliberations over moral dilemmas"
)]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Synchronous,
    RoundRobin,
}

impl From<FormatArg> for DeliberationFormat {
    fn from(f: FormatArg) -> DeliberationFormat {
        match f {
            FormatArg::Synchronous => DeliberationFormat::Synchronous,
            FormatArg::RoundRobin => DeliberationFormat::RoundRobin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GoalArg {
    /// Correctness outranks consensus.
    Correctness,
    /// Consensus and correctness weighted equally.
    Balanced,
}

impl From<GoalArg> for GoalVariant {
    fn from(g: GoalArg) -> GoalVariant {
        match g {
            GoalArg::Correctness => GoalVariant::CorrectnessPriority,
            GoalArg::Balanced => GoalVariant::Balanced,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a ranked corpus from a raw submission dump.
    Ingest(IngestArgs),
    /// Deliberate corpus dilemmas with a named agent roster.
    Deliberate(DeliberateArgs),
    /// Annotate a run's turns with values using a judge agent.
    Annotate(AnnotateArgs),
    /// Compute descriptive statistics for a run.
    Analyze(AnalyzeArgs),
    /// Fit the verdict-choice model to a run's transcripts.
    Fit(FitArgs),
    /// Generate synthetic deliberations through the real engine.
    Simulate(SimulateArgs),
    /// Replay checked-in deliberation fixtures against golden outcomes.
    Replay(ReplayArgs),
    /// Assemble the report bundle: report.json plus plot-data files.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Raw submission dump, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Output corpus path (JSONL, ranked by disagreement).
    #[arg(long)]
    pub output: PathBuf,
    /// Keep this many top posts.
    #[arg(long, default_value_t = 1000)]
    pub top_k: usize,
    /// Provenance origin recorded on every dilemma.
    #[arg(long, default_value = "dump")]
    pub origin: String,
    /// Provenance timestamp (unix seconds). Defaults to the newest
    /// submission's created_at so identical inputs give identical bytes.
    #[arg(long)]
    pub ingested_at: Option<i64>,
}

#[derive(Debug, Clone, Args)]
pub struct DeliberateArgs {
    /// Corpus file produced by ingest.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Agent names from the roster file, in speaking order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub roster: Vec<String>,
    #[arg(long, value_enum)]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value_t = GoalArg::Correctness)]
    pub goal: GoalArg,
    #[arg(long, default_value_t = deliberata_core::protocol::DEFAULT_MAX_ROUNDS)]
    pub max_rounds: u32,
    /// Root directory holding run directories.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Deliberate only the first N corpus dilemmas.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AnnotateArgs {
    /// Run directory (runs/<run_id>).
    #[arg(long)]
    pub run: PathBuf,
    /// Judge agent name from the roster file.
    #[arg(long)]
    pub judge: String,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Bootstrap resamples behind every interval.
    #[arg(long, default_value_t = deliberata_core::metrics::DEFAULT_BOOTSTRAP_RESAMPLES)]
    pub resamples: usize,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// L2 penalty weight.
    #[arg(long, default_value_t = deliberata_core::inference::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Drop the per-dilemma baseline terms from the model.
    #[arg(long)]
    pub no_phi: bool,
    /// Bootstrap replicates for effect CIs; 0 skips the bootstrap.
    #[arg(long, default_value_t = deliberata_core::inference::DEFAULT_BOOTSTRAP_REPLICATES)]
    pub bootstrap: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Synthetic agent names from the roster file, in speaking order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub roster: Vec<String>,
    #[arg(long, value_enum)]
    pub format: FormatArg,
    #[arg(long, value_enum, default_value_t = GoalArg::Correctness)]
    pub goal: GoalArg,
    #[arg(long, default_value_t = 100)]
    pub n_dilemmas: usize,
    #[arg(long, default_value_t = deliberata_core::protocol::DEFAULT_MAX_ROUNDS)]
    pub max_rounds: u32,
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Directory of fixture JSON files; defaults to the built-in set.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Also persist the replayed transcripts as a normal run directory.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Bootstrap resamples behind every interval.
    #[arg(long, default_value_t = deliberata_core::metrics::DEFAULT_BOOTSTRAP_RESAMPLES)]
    pub resamples: usize,
}

/// Dispatch a parsed invocation. Every command prints a short summary on
/// stdout and reports problems through the typed error.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest(args) => commands::ingest(args),
        Command::Deliberate(args) => commands::deliberate(&cli.globals, args),
        Command::Annotate(args) => commands::annotate(&cli.globals, args),
        Command::Analyze(args) => commands::analyze(&cli.globals, args),
        Command::Fit(args) => commands::fit(&cli.globals, args),
        Command::Simulate(args) => commands::simulate(&cli.globals, args),
        Command::Replay(args) => commands::replay(args),
        Command::Report(args) => commands::report(&cli.globals, args),
    }
}
