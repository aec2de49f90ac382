//! Command-line driver for the augmentation pipeline.
//!
//! Each subcommand is one pipeline stage. Generating commands are pure
//! functions of their input files, settings and master seed; the seed and
//! settings are recorded in a header line of every data file they write.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{PipelineConfig, Settings, UsageError};

#[derive(Parser, Debug)]
#[command(name = "hardneg", version, about = "Challenging negative responses for dialogue response selection")]
pub struct Cli {
    /// key=value settings file; command-line options take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub values: config::ValueOptions,

    #[command(flatten)]
    pub flags: config::AblationFlags,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train the n-gram language model and report held-out perplexity
    TrainLm,
    /// Dump garbled histories as JSONL
    Garble,
    /// Print ranked keyword candidates per conversation
    Keywords,
    /// Dump scored candidate batches as JSONL
    Generate,
    /// Add one selected negative per context of a 1:1 dataset
    Augment,
    /// Train the logistic matcher
    TrainMatcher,
    /// Rank test candidates with the matcher and report metrics
    Eval,
    /// Print corpus statistics
    Stats,
    /// Show one conversation with its candidates and perplexities
    Inspect,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainLm => "train-lm",
            Command::Garble => "garble",
            Command::Keywords => "keywords",
            Command::Generate => "generate",
            Command::Augment => "augment",
            Command::TrainMatcher => "train-matcher",
            Command::Eval => "eval",
            Command::Stats => "stats",
            Command::Inspect => "inspect",
        }
    }
}

/// Exit code for a failed run: 2 for usage and configuration errors, else 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(e.downcast_ref::<hardneg::Error>(), Some(hardneg::Error::Config(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

/// Parses settings and runs the subcommand, writing summaries to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let settings = Settings::layered(cli.config.as_deref(), &cli.values, &cli.flags)?;
    let cfg = PipelineConfig::from_settings(&settings)?;
    match cfg.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            // The sink may not be Send; buffer inside the pool.
            let mut buf = Vec::new();
            let result = pool.install(|| commands::dispatch(cli.command, &cfg, &mut buf));
            out.write_all(&buf)?;
            result
        }
        None => commands::dispatch(cli.command, &cfg, out),
    }
}

/// Convenience for tests and scripts: parse `args` (without the program
/// name) and run, returning the captured output.
pub fn run_args<I, S>(args: I) -> anyhow::Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("hardneg")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| UsageError(e.to_string()))?;
    let mut buf = Vec::new();
    run(&cli, &mut buf)?;
    Ok(String::from_utf8(buf)?)
}
