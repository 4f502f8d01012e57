//! Command-line front end: configuration parsing, the six commands and
//! their on-disk artifacts.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
//! 3 bad input data, 4 non-finite numerics.

pub mod commands;
pub mod config;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use commands::run;
pub use config::{parse_args, RunConfig};

pub const COMMANDS: &[&str] = &["gen-data", "train", "eval", "perturb", "analyze", "ablate"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mlada::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mlada::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Json(_) => 1,
            CliError::Core(e) => match e {
                E::Usage(_) => 2,
                E::Data(_) | E::Parse { .. } | E::Shape { .. } => 3,
                E::NonFinite(_) => 4,
                E::Io(_) => 1,
            },
        }
    }
}

/// Resolved configuration of one run, written as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.resolved(),
        }
    }
}
