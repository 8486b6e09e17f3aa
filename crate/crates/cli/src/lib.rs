//! Library half of the command-line harness: configuration, synthetic data,
//! command implementations, and report emission. The binary in `main.rs` is
//! a thin argument parser over these functions.

pub mod commands;
pub mod config;
pub mod report;
pub mod synth;

use std::fmt;

/// Harness errors, split by exit code: configuration problems exit 2,
/// missing upstream artifacts exit 3, anything else 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingArtifact(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

macro_rules! from_core_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Other(e.to_string())
            }
        }
    )*};
}

from_core_error!(
    textshield_core::grad::GradError,
    textshield_core::text::DataError,
    textshield_core::victim::ModelError,
    textshield_core::detector::DetectorError,
    textshield_core::attack::AttackError,
    textshield_core::corrector::DefendError,
    textshield_core::checkpoint::CheckpointError,
    std::io::Error,
    serde_json::Error
);
