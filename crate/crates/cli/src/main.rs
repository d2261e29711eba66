//! `gibbscap`: caption, infill, batch, eval and trace commands over the
//! polishing engine.

mod backend;
mod batch;
mod commands;
mod eval;
mod failure;
mod settings;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::failure::CliError;

#[derive(Debug, Parser)]
#[command(name = "gibbscap", version, about = "Polish image captions by iterative masked-token replacement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Caption one image and print its record.
    Caption(commands::CaptionArgs),
    /// Rewrite chosen slots of a reference caption.
    Infill(commands::InfillArgs),
    /// Run every image and seed of a job specification.
    Batch(batch::BatchArgs),
    /// Diversity, BLEU and match-score report over caption records.
    Eval(eval::EvalArgs),
    /// Export the per-iteration score series of a trace.
    Trace(commands::TraceArgs),
    /// Serve a synthetic fixture over the wire protocol.
    ServeSynthetic(commands::ServeArgs),
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Caption(a) => commands::caption(&a),
        Command::Infill(a) => commands::infill(&a),
        Command::Batch(a) => batch::batch(&a).map(|r| {
            log::info!("batch finished: {} jobs, {} resumed", r.jobs, r.resumed);
        }),
        Command::Eval(a) => eval::eval(&a),
        Command::Trace(a) => commands::trace(&a),
        Command::ServeSynthetic(a) => commands::serve(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let err = CliError::usage("usage", e.to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
