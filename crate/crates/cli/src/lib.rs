//! Process-level plumbing around `splitcvr-core`: transports, the clean-room
//! server loop, the feature-party client, training drivers, file formats,
//! experiment configs, and run manifests.
//!
//! The `splitcvr` binary is a thin layer over these modules so integration
//! tests can drive the same code paths in-process.

pub mod client;
pub mod commands;
pub mod config;
pub mod files;
pub mod manifest;
pub mod server;
pub mod training;
pub mod transport;

/// Marker for command-line misuse that surfaced after argument parsing,
/// e.g. flag combinations clap cannot express. Exits with code 1 instead
/// of the runtime-error code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}
