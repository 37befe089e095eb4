//! Command implementations behind the `fedemb` binary.
//!
//! Every command resolves relative output paths against the output root,
//! which is the working directory unless `FEDEMB_OUTPUT_ROOT` is set.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;

pub const OUTPUT_ROOT_ENV: &str = "FEDEMB_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    UnresolvableFar(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::UnresolvableFar(_) => 4,
        }
    }
}

impl From<fedemb_core::Error> for CliError {
    fn from(e: fedemb_core::Error) -> Self {
        use fedemb_core::Error as E;
        match e {
            E::InvalidArgument(m) => CliError::Config(m),
            e @ E::UnresolvableFar { .. } => CliError::UnresolvableFar(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// `path` if absolute, else `base/path`.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
