//! Language-specific sub-network training for multilingual translation on a
//! toy scale: a small transformer, magnitude-pruned per-pair masks, masked
//! fine-tuning, and the evaluation and analysis around it.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod mask;
pub mod tensor;
pub mod training;
pub mod transformer;
mod wire;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
