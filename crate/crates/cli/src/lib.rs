//! Experiment driver for `tomocvae-core`: configuration, file formats,
//! checkpoints, reports, plots and the command implementations behind the
//! `tomocvae` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gridio;
pub mod manifest;
pub mod par;
pub mod plot;
pub mod report;

pub use config::{ExperimentConfig, ValidationError};

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for an invalid configuration or command line.
pub const EXIT_INVALID: i32 = 2;
/// Exit status for a failure while running.
pub const EXIT_RUNTIME: i32 = 3;

/// Exit status for an error returned by a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ValidationError>()) {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}
