//! Two-pass scheduled-sampling training for toy transformer sequence-to-
//! sequence models.
//!
//! Teacher forcing trains a decoder only on gold prefixes, so at decode time
//! the model has never seen its own mistakes. Scheduled sampling mitigates
//! this by sometimes feeding the model its own predictions during training.
//! A transformer decoder conditions each position on the whole prefix, so
//! this crate implements scheduled sampling as two decoder passes sharing
//! one parameter set: pass 1 runs teacher-forced and produces per-position
//! vocabulary scores, pass 2 consumes a per-position random mix of gold
//! embeddings and prediction embeddings, and the loss is taken on pass 2.
//!
//! The prediction embedding can be the argmax row, a top-k weighted
//! average, a temperature softmax mix, a Gumbel-softmax sample, or a
//! sparsemax mix, with gradients optionally flowing back into the first
//! pass for the dense mixes.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod bleu;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod mixing;
pub mod rng;
pub mod scheduling;
pub mod tasks;
pub mod trainer;
pub mod transformer;

pub use autodiff::{Graph, Tensor, TensorRef};
pub use error::{Error, Result};

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    cli::main_with_args()
}
