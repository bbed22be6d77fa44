//! Text-guided multiple-instance learning for dynamic facial expression
//! recognition, sized to train on a single CPU core.
//!
//! A video is a bag of per-frame feature vectors with one coarse label. The
//! pipeline runs a multi-grained temporal network over the bag, builds
//! per-class label features from frozen text embeddings plus visual prompts,
//! and classifies the bag by temperature-scaled cosine similarity.

// `!(x > 0.0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod format;
pub mod gradcheck;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod prompt;
pub mod synthetic;
pub mod temporal;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod train;

pub use error::{Error, Result};
