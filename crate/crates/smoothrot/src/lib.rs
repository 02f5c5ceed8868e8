//! Experiment harness for smoothing + Hadamard rotation post-training
//! quantization on tiny synthetic transformers.
//!
//! The numerical work lives in [`smoothrot_core`]; this crate adds the
//! tensor archive format, configuration, run reports and orchestration used
//! by the `smoothrot` binary.

pub mod archive;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod persist;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use smoothrot_core as core;
