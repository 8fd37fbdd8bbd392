//! A spatial-temporal auxiliary branch over a frozen image encoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode differentiation, gradient checking.
//! - [`encoders`]: the frozen multi-level vision backbone and the text encoder.
//! - [`branch`]: the auxiliary branch layers and the final fusion.
//! - [`objectives`]: losses, similarity, retrieval and classification metrics.
//! - [`synthdata`]: deterministic synthetic clips and their binary file format.
//! - [`harness`]: optimizer, training, evaluation, experiment suites and reports.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod branch;
pub mod encoders;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod params;
pub mod synthdata;
