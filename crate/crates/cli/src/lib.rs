//! Experiment runner: simulates a dataset, runs both odometry front ends,
//! executes the pairwise merge matrix and writes the result tables.
//!
//! Every stage reads its inputs from and writes its outputs to one output
//! root, so later stages can be rerun without recomputing earlier ones.

pub mod args;
pub mod config;
pub mod fuzzing;
pub mod pipeline;

pub use args::{run, Cli};
pub use config::ExperimentConfig;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0} of {1} matrix cells failed")]
    CellsFailed(usize, usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::CellsFailed(..) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn data(e: impl std::fmt::Display) -> CliError {
        CliError::Data(e.to_string())
    }
}
