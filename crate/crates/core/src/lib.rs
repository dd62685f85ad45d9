//! FastSpeech2-style acoustic model with an auxiliary SSL-representation
//! reconstruction head, the repeater that aligns SSL frames to acoustic
//! frames, a deterministic synthetic corpus, training, and objective metrics.

pub mod align;
pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fastspeech2;
pub mod features;
pub mod matrix;
pub mod nn;
pub mod saltts;
pub mod train;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use matrix::Matrix;
