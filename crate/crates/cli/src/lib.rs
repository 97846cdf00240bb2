//! Command-line driver for the task-oriented denoising pipeline: config
//! parsing, pipeline stages and the run manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{CaseSelection, Check, ReproduceReport};
pub use config::Config;
pub use error::CliError;

/// Worker threads from `TOD_THREADS`, defaulting to 1.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("TOD_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("TOD_THREADS must be a positive integer, got `{v}`"))),
    }
}
