//! Adapting a pruned classifier to an observed subset of its label space by
//! replaying feature activations sampled from a class-conditional VAE,
//! instead of storing input samples on the device.
//!
//! Pipeline, in module order:
//!
//! 1. [`models`]: train the deployed model on the source data, prune a copy.
//! 2. [`cvae`]: learn the pruned model's activation distribution per class.
//! 3. [`adaptation`]: estimate the target label distribution from the
//!    deployed model's predictions, generate activations, retrain the
//!    classifier.
//! 4. [`evaluation`]: accuracy, memory ledgers, budget sweeps.
//!
//! [`pipeline`] chains the stages through on-disk artifacts.

pub mod adaptation;
pub mod config;
pub mod cvae;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod models;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, ErrorCategory, FormatError, Result};
