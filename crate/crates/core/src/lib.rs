//! Difficulty-weighted meta-learning for long-tailed classification.
//!
//! A small auxiliary network maps the classifier's per-class accuracies to
//! per-class difficulties, which weight the classifier's loss. Its
//! parameters are trained through a one-step look-ahead of the classifier
//! on a balanced meta set, plus a driver term that pulls difficulties
//! toward one minus the normalized accuracy.

// Parameter checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::result_large_err)]

pub mod baselines;
pub mod data;
pub mod difficulty;
pub mod error;
pub mod harness;
pub mod metatrain;
pub mod nnet;
pub mod rng;

pub use error::{Error, Result};
