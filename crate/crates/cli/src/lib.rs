//! Command-line front end for persona-mtl: data preparation, training,
//! decoding, reranking, weight tuning, evaluation and a chat loop.
//!
//! Every subcommand is orchestration over the library; numerical work lives
//! in `persona_mtl`.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod artifacts;
mod chat;
mod decode;
mod evaluate;
mod prep;
pub mod settings;
mod train;

use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or settings; exit code 1.
    Usage(String),
    /// Missing or malformed data, or a failing library call; exit code 2.
    Data(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn data_error(msg: impl std::fmt::Display) -> CliError {
    CliError::Data(anyhow::anyhow!("{msg}"))
}

#[derive(Debug, Parser)]
#[command(name = "persona-mtl", version, about = "Multi-task persona conversation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Setting overrides, e.g. `hidden=32 seed=3`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary and encode corpora into binary shards.
    Prep(prep::PrepArgs),
    /// Pre-train, then run multi-task training for the chosen variant.
    Train(train::TrainArgs),
    /// Train the reverse model p(message | response) used for reranking.
    TrainReverse(train::ReverseArgs),
    /// Beam-search N-best lists for a data split.
    Decode(decode::DecodeArgs),
    /// Pick one response per source by MMI score.
    Rerank(decode::RerankArgs),
    /// Grid-tune the reranking weights on dev BLEU.
    Tune(decode::TuneArgs),
    /// Perplexity, BLEU, distinct-n and judge aggregation.
    Eval(evaluate::EvalArgs),
    /// Interactive chat with a trained model.
    Chat(chat::ChatArgs),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prep(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::TrainReverse(a) => &a.common,
            Command::Decode(a) => &a.common,
            Command::Rerank(a) => &a.common,
            Command::Tune(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Chat(a) => &a.common,
        }
    }
}

/// Defaults, then the config file, then command-line overrides.
pub fn resolve_settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    s.apply_overrides(&common.overrides)?;
    Ok(s)
}

pub fn run(cli: Cli, input: &mut dyn BufRead, output: &mut dyn Write) -> Result<()> {
    let settings = resolve_settings(cli.command.common())?;
    match cli.command {
        Command::Prep(a) => prep::run(&a, settings, output),
        Command::Train(a) => train::run(&a, settings, output),
        Command::TrainReverse(a) => train::run_reverse(&a, settings, output),
        Command::Decode(a) => decode::run_decode(&a, settings, output),
        Command::Rerank(a) => decode::run_rerank(&a, settings, output),
        Command::Tune(a) => decode::run_tune(&a, settings, output),
        Command::Eval(a) => evaluate::run(&a, settings, output),
        Command::Chat(a) => chat::run(&a, settings, input, output),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I, input: &mut dyn BufRead, output: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, input, output) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
