//! `dmetric`: train, apply and inspect the dialogue response metric.

mod commands;
mod config;

use std::fs::File;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation, bad config, or a missing input path. Exit 2.
    Usage(String),
    /// A module failed on the data. Exit 1.
    Data(String),
    /// Some work succeeded, some did not. Exit 1.
    Partial(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Partial(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Partial(m) => f.write_str(m),
        }
    }
}

impl From<dialogue_metric::Error> for CliError {
    fn from(e: dialogue_metric::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "dmetric", version, about = "Reference-free dialogue response scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set training.learning_rate=0.003`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scorer; writes ckpt-best, ckpt-last, history.json.
    Train(Common),
    /// Score JSONL `{id, context, response}` lines; prints `{id, score}` lines.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input file; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Δ table on the test split (and optional zero-shot corpus).
    Evaluate(Common),
    /// Spearman correlation against human judgement logs.
    Correlate(Common),
    /// Temporal-position probe with a 2D LDA projection.
    Probe(Common),
    /// Write the planted synthetic corpus and its synonym table.
    GenSynthetic(Common),
    /// Serve the reference hash encoder over the adapter wire format on stdin/stdout.
    #[command(hide = true)]
    HashAdapter {
        #[arg(long)]
        dim: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Score { common, .. } => ("score", common),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Correlate(c) => ("correlate", c),
        Command::Probe(c) => ("probe", c),
        Command::GenSynthetic(c) => ("gen-synthetic", c),
        Command::HashAdapter { dim } => {
            return dialogue_metric::encoder::serve_hash_adapter(*dim, io::stdin().lock(), io::stdout().lock())
                .map_err(|e| CliError::Data(e.to_string()));
        }
    };
    if let Some(p) = &common.config {
        if !p.exists() {
            return Err(CliError::Usage(format!("config file does not exist: {}", p.display())));
        }
    }
    let cfg = config::load(
        common.config.as_deref(),
        &common.overrides,
        common.workers,
        name != "score",
    )?;
    cfg.validate()?;
    cfg.check_paths(name)?;
    dialogue_metric::par::with_threads(cfg.workers, || match &cli.command {
        Command::Train(_) => commands::train(&cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Correlate(_) => commands::correlate_cmd(&cfg),
        Command::Probe(_) => commands::probe(&cfg),
        Command::GenSynthetic(_) => commands::gen_synthetic(&cfg),
        Command::Score { checkpoint, input, .. } => {
            for p in std::iter::once(checkpoint).chain(input) {
                if !p.exists() {
                    return Err(CliError::Usage(format!("path does not exist: {}", p.display())));
                }
            }
            let stdout = io::stdout().lock();
            let stderr = io::stderr().lock();
            match input {
                Some(p) => {
                    let f = File::open(p).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", p.display())))?;
                    commands::score(&cfg, checkpoint, BufReader::new(f), stdout, stderr)
                }
                None => commands::score(&cfg, checkpoint, io::stdin().lock(), stdout, stderr),
            }
        }
        Command::HashAdapter { .. } => unreachable!("handled above"),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
