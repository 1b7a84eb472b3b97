mod eval_cmd;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status classes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "triage", version, about = "Issue triage assistant: similar issues, severity labels and likely buggy files")]
struct Cli {
    /// Service configuration file.
    #[arg(long, global = true, env = "TRIAGE_CONFIG", default_value = "triage.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the webhook listener and pipeline workers.
    Serve,
    /// Install a repository and backfill its issues.
    Install {
        /// Repository as owner/name.
        repo: String,
    },
    /// Show installed repositories and their sync state.
    Status {
        #[arg(long)]
        json: bool,
    },
    /// Train a severity model from labelled JSONL.
    TrainSeverity {
        file: PathBuf,
        /// Where to write the model (JSON); prints a summary only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = triage_core::analyzers::DEFAULT_TITLE_REPEAT)]
        title_repeat: usize,
    },
    /// Score an analyzer against a labelled dataset.
    Eval(EvalArgs),
    /// Serve the mock forge from a fixture.
    Sim(SimArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    Duplicates,
    Severity,
    Localization,
}

#[derive(Debug, Args)]
struct EvalArgs {
    task: Task,
    file: PathBuf,
    /// Cutoffs for P@k and R@k; accuracy uses the largest.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 5])]
    k: Vec<usize>,
    /// Similarity threshold for duplicates.
    #[arg(long, default_value_t = 0.6)]
    threshold: f64,
    #[arg(long, default_value_t = triage_core::analyzers::DEFAULT_TITLE_REPEAT)]
    title_repeat: usize,
    /// Severity model JSON; the bundled seed model when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct SimArgs {
    fixture: PathBuf,
    #[arg(long, default_value = "127.0.0.1:9090")]
    listen: std::net::SocketAddr,
    /// Where to send signed webhook deliveries.
    #[arg(long)]
    webhook_url: Option<String>,
    /// JSON list of fault rules to load at start.
    #[arg(long)]
    faults: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Eval(args) => eval_cmd::run(&args),
        Command::TrainSeverity {
            file,
            out,
            title_repeat,
        } => eval_cmd::train(&file, out.as_deref(), title_repeat),
        Command::Status { json } => ops::status(&cli.config, json),
        Command::Install { repo } => ops::runtime()?.block_on(ops::install(&cli.config, &repo)),
        Command::Serve => ops::runtime()?.block_on(ops::serve(&cli.config)),
        Command::Sim(args) => ops::runtime()?.block_on(ops::sim(&cli.config, &args)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let informational = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if informational { 0 } else { 1 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
