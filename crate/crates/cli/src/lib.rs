//! Command-line front-end for the selflearn lab.
//!
//! Every run reads an [`ExperimentConfig`], writes it canonicalized to
//! `<out>/<hash>/config.json` and leaves a [`RunRecord`] next to the
//! command's artifacts.

pub mod args;
pub mod commands;
pub mod config;
pub mod record;

pub use config::ExperimentConfig;
pub use record::{RunOutcome, RunRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(selflearn::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<selflearn::Error> for CliError {
    fn from(e: selflearn::Error) -> Self {
        match e {
            selflearn::Error::InvalidConfig(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}
