#![cfg_attr(not(any(feature = "std", test)), no_std)]
//! Channel-wise smoothing fused with Hadamard rotation for low-bit
//! weight/activation/KV quantization of GLU transformer blocks.
//!
//! Everything here is pure computation over [`numerics::Tensor`] and builds
//! without `std` (an allocator is required). File formats, reporting and the
//! command-line front end live in the companion `smoothrot` crate.

extern crate alloc;

pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod outliers;
pub mod quant;
pub mod rotation;
pub mod smoothing;
pub mod weight_quant;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};

/// Crate version, recorded in run reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
