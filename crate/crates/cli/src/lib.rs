//! Command-line driver: `train`, `eval`, `check`, `bench` and `synth`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | one or more checks failed |
//! | 2 | bad usage, config, checkpoint, or a model/graph shape mismatch |
//! | 3 | data errors: missing or unreadable files, parse or validation failures |
//! | 4 | training diverged |

pub mod bench;
pub mod checks;
pub mod commands;
pub mod config;
pub mod report;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hesrn_core::Error as CoreError;

pub use config::RunConfig;
pub use report::Report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("checkpoint expects {checkpoint}, graph provides {graph}")]
    Incompatible { checkpoint: String, graph: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Incompatible { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                CoreError::NonDeterministic { .. } => 1,
                CoreError::Shape { .. }
                | CoreError::EmptyAxis { .. }
                | CoreError::Divisibility { .. }
                | CoreError::Rank { .. }
                | CoreError::Range(_)
                | CoreError::Param(_)
                | CoreError::Config(_)
                | CoreError::Checkpoint(_) => 2,
                CoreError::Parse { .. } | CoreError::Validation(_) | CoreError::Io { .. } => 3,
                CoreError::NonFinite { .. } | CoreError::Divergence { .. } => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hesrn", version, about = "Heterogeneous slot-aware retentive network")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Any config key as `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    rest: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a graph file and write report, checkpoint and metric log.
    Train(Overrides),
    /// Score a checkpoint on a graph's test split.
    Eval(Overrides),
    /// Run property checks: grad, equivalence, invariants, learnability.
    Check(Overrides),
    /// Time the retention path against dense attention.
    Bench(Overrides),
    /// Write a synthetic heterogeneous graph.
    Synth(Overrides),
}

fn resolve(cli: Cli) -> Result<(Command, RunConfig)> {
    let rest = match &cli.command {
        Command::Train(o) | Command::Eval(o) | Command::Check(o) | Command::Bench(o) | Command::Synth(o) => &o.rest,
    };
    let mut pairs = config::parse_overrides(rest)?;
    let mut file = cli.config;
    if let Some(i) = pairs.iter().rposition(|(k, _)| k == "config") {
        file = Some(PathBuf::from(pairs[i].1.clone()));
    }
    pairs.retain(|(k, _)| k != "config");
    if let Some(seed) = cli.seed {
        pairs.insert(0, ("seed".into(), seed.to_string()));
    }
    if let Some(out) = cli.out {
        pairs.insert(0, ("out".into(), out.display().to_string()));
    }
    let cfg = RunConfig::load(file.as_deref(), &pairs)?;
    Ok((cli.command, cfg))
}

fn dispatch(cli: Cli) -> Result<Report> {
    let (command, cfg) = resolve(cli)?;
    match command {
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Check(_) => checks::run(&cfg),
        Command::Bench(_) => bench::run(&cfg),
        Command::Synth(_) => commands::synth(&cfg),
    }
}

/// Runs one command and returns its report. `args[0]` is the program name.
pub fn execute<I, S>(args: I) -> Result<Report>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    dispatch(Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?)
}

/// Entry point used by the binary: prints the report, or the error on
/// stderr, and returns the exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(report) => {
            let _ = stdout.write_all(report.render().as_bytes());
            let failures = report.failures();
            if failures.is_empty() {
                0
            } else {
                eprintln!("error: {} check(s) failed: {}", failures.len(), failures.join(", "));
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
