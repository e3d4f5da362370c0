//! Command-line front end: `fit`, `cmse`, `holdout-pc`, `profile`, `simulate`.
//!
//! Exit codes: 0 success, 2 data or I/O error, 3 convergence failure,
//! 4 configuration error. `UEB_THREADS` caps the worker pool.

pub mod commands;
pub mod dataset;
pub mod error;
pub mod output;

use std::ffi::OsString;

use clap::Parser;

use crate::commands::{execute, Cli};
use crate::error::{CliError, EXIT_CONFIG, EXIT_OK};

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("UEB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("UEB_THREADS must be a positive integer, got '{raw}'")))?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match init_threads().and_then(|()| execute(cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
