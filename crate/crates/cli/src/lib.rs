//! Command-line front end for the branch segmentation toolkit.
//!
//! Every subcommand resolves its settings from built-in defaults, an optional
//! `--config` JSON file and explicit flags (in that order of precedence), and
//! writes the result to `resolved_config.json` beside its outputs.

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub mod artifacts;
pub mod chart;
pub mod choices;
pub mod error;
pub mod eval;
pub mod generate;
pub mod rank;
pub mod report;
pub mod run;
pub mod train;

pub use error::{CliError, CliResult, EXIT_DATA, EXIT_DIVERGENCE, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "branchseg",
    version,
    about = "Segment occluded tree branches from RGBD images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic RGBD orchard dataset.
    Generate(generate::GenerateArgs),
    /// Train a segmentation model.
    Train(train::TrainArgs),
    /// Evaluate trained models on a dataset split.
    Eval(eval::EvalArgs),
    /// Rank samples by difficulty and evaluate models on the hardest k.
    Rank(rank::RankArgs),
    /// Merge eval and rank outputs into a markdown report with charts.
    Report(report::ReportArgs),
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Rank(a) => rank::run(a),
        Command::Report(a) => report::run(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
