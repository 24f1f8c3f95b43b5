//! Command-line front end: synthetic data generation, training, rendering,
//! evaluation and gradient verification.

pub mod commands;
pub mod config;
pub mod error;

use clap::{Parser, Subcommand};

pub use commands::{CheckgradArgs, EvalArgs, RenderArgs, SynthArgs, TrainArgs};
pub use config::{ConfigFlags, RunConfig};
pub use error::{CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(
    name = "unveil",
    version,
    about = "Low-light radiance fields with concealing fields"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired normal/low-light synthetic dataset.
    Synth(SynthArgs),
    /// Train on a low-light dataset.
    Train(TrainArgs),
    /// Render views from a checkpoint.
    Render(RenderArgs),
    /// Compare rendered images against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Checkgrad(CheckgradArgs),
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => commands::cmd_synth(a),
        Command::Train(a) => commands::cmd_train(a).map(|_| ()),
        Command::Render(a) => commands::cmd_render(a).map(|_| ()),
        Command::Eval(a) => commands::cmd_eval(a).map(|_| ()),
        Command::Checkgrad(a) => commands::cmd_checkgrad(a).map(|_| ()),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to stderr as one line.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand {
                    2
                } else {
                    0
                };
            }
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or(&msg)
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::config(first).line());
            return ErrorKind::Config.code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code()
        }
    }
}
