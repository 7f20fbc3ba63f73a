mod commands;
mod config;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::error;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: missing flag, refused overwrite. Exit 1.
    Usage(String),
    /// Unreadable or inconsistent input, violated invariant. Exit 2.
    Data(String),
    /// Non-finite loss or degenerate vector. Exit 3.
    Numeric(String),
}

impl CliError {
    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<emem::Error> for CliError {
    fn from(e: emem::Error) -> Self {
        match e {
            emem::Error::Numeric(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "emem", about = "Episodic-memory neural decision tree pipeline", disable_version_flag = true)]
struct Cli {
    /// Print tool and file format versions.
    #[arg(short = 'V', long)]
    version: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker cap; 0 uses every core.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Repeat for more log detail on stderr.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[arg(short, long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Partition {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// JSONL dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Taxonomy file; defaults to the `.taxonomy.json` sibling of the
    /// dataset, or to the labels present in it.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its taxonomy.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Instances per class.
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Train the base encoder.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "train")]
        partition: Partition,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster label embeddings into the behavior tree.
    BuildTree {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Precomputed label embeddings; the built-in description
        /// embedding is used otherwise.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        linkage: Option<emem::tree::Linkage>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill the leaf memory banks from training embeddings.
    Implant {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "train")]
        partition: Partition,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the leaf transforms of the decision tree.
    TrainNdt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "train")]
        partition: Partition,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        banks: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a label for every instance of a JSONL file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit one explanation trace per instance of a JSONL file.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the tree (or the base encoder with --base) on a partition.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "test")]
        partition: Partition,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Evaluate the encoder's own classifier instead of the tree.
        #[arg(long)]
        base: bool,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Write the confusion matrix as CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// Write a copy of the model with prototype usage counts.
        #[arg(long)]
        usage_out: Option<PathBuf>,
        /// Comma-separated labels to report separately on stderr.
        #[arg(long, value_delimiter = ',')]
        few_shot: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Implant, train and evaluate for each memory threshold.
    SweepEta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7,0.9")]
        etas: Vec<f64>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::TrainBase { common, .. }
            | Command::BuildTree { common, .. }
            | Command::Implant { common, .. }
            | Command::TrainNdt { common, .. }
            | Command::Predict { common, .. }
            | Command::Explain { common, .. }
            | Command::Eval { common, .. }
            | Command::SweepEta { common, .. } => common,
        }
    }
}

fn version_text() -> String {
    format!(
        "emem {}\nformats: {}, {}, {}\nconfig schema_version: {}",
        env!("CARGO_PKG_VERSION"),
        emem::encoder::ENCODER_FORMAT,
        emem::tree::TREE_FORMAT,
        emem::ndt::NDT_FORMAT,
        config::SCHEMA_VERSION
    )
}

fn init_logging(common: &Common) {
    let level = if common.quiet {
        tracing::Level::ERROR
    } else {
        match common.verbose {
            0 => tracing::Level::INFO,
            1 => tracing::Level::DEBUG,
            _ => tracing::Level::TRACE,
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if cli.version {
        println!("{}", version_text());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    init_logging(command.common());
    match commands::run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
