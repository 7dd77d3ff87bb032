//! Multi-label classification from noisily labelled data.
//!
//! A classifier predicts the true label distribution `p(y | x)`; a noise
//! modeling head maps it to the distribution of the observed labels through a
//! per-class 2x2 transition `p(z | y, x)`. Both are trained together by
//! minimising the cross-entropy against the observed labels, and only the
//! classifier is used at test time.
//!
//! Modules:
//! - [`prob`]: sigmoid, column softmax, transitions, posteriors and the closed
//!   form logit gradient
//! - [`classifier`]: feedforward network, backpropagation, SGD, stage-one training
//! - [`nmn`]: the noise head and stage-two joint training
//! - [`mil`]: noisy-OR bag pooling
//! - [`em`]: the EM reference trainer and the gradient equivalence check
//! - [`datagen`]: synthetic data and noise injection
//! - [`eval`]: average precision and class means
//! - [`harness`]: configuration-driven experiments behind the `nmn` binary

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod datagen;
pub mod em;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod mil;
pub mod model;
pub mod nmn;
pub mod prob;

pub use error::{Error, Result};
