//! Dataset ingestion, synthetic data, persistence and the `pixelhop`
//! command-line workflow around the encoder in the `pixelhop` crate.

pub mod bundle;
pub mod commands;
pub mod dataset;
pub mod io;
pub mod pipeline;
pub mod synthetic;
pub mod text;

use std::ffi::OsString;

use clap::Parser;

pub use commands::{Cli, Command};

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit status; failures print a one-line diagnostic to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}
