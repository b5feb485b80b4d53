//! Command-line front end. Every subcommand is orchestration over the
//! `scenelayers` library; outputs land under the run directory together with
//! an `outputs.json` listing.
//!
//! Exit status: 0 success, 2 usage, 3 data, 4 backend, 5 output.

mod args;
mod commands;
mod config;
mod error;
mod plan;
mod registry;

use std::ffi::OsString;

use clap::Parser;

pub use args::{Cli, Command, RunArgs};
pub use commands::OUTPUTS_FORMAT;
pub use config::{FileConfig, RunConfig, DEFAULT_MODEL};
pub use error::CliError;
pub use plan::{plan, QueryPlan, ASSUMED_REPLY_TOKENS};
pub use registry::{build_gateway, load_registry, BUILTIN_MOCK};

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match commands::run(cli.command, cli.config.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
