//! File formats, run directories and the command-line driver around
//! `langssl-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod metrics;
pub mod report;
pub mod verify;

pub use error::{Error, Result};

/// Recorded in checkpoints and run manifests.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
