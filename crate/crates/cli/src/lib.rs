//! Experiment runner for grow-sequence searches: configuration, run
//! directories and reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Core(#[from] grownet::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("run directory {}: {reason}", dir.display())]
    RunDir { dir: PathBuf, reason: String },

    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    /// 1 for configuration problems, 2 for everything that fails later.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Toml(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
