//! Speaker-embedding noise compensation toolkit.

pub mod cli;
pub mod config;
pub mod denoiser;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod nnet;
pub mod pipeline;
pub mod plda;
pub mod rng;
pub mod synth;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
