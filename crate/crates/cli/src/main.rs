//! `stpatch` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, UsageError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || e.downcast_ref::<stpatch::Error>().is_some_and(stpatch::Error::is_usage);
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
