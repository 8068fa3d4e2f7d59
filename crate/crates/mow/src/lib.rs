//! Orchestration, file formats, and visualization for the mixture-of-world-
//! models trainer. The algorithmic core lives in `mow-core`; this crate adds
//! training end to end, checkpoints, the metrics stream, TOML configs, PNG
//! dumps, and the `mow` CLI.

pub mod checkpoint;
pub mod configfile;
pub mod error;
pub mod metrics;
pub mod orchestrator;
pub mod viz;

pub use error::{Error, Result};
