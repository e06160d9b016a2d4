//! Proposal-free instance segmentation on synthetic desk-scale scenes.
//!
//! The pipeline regresses a per-instance distance field with one encoder-
//! decoder, feeds the learned distance features into a second encoder-decoder
//! that produces unit-length pixel embeddings, then clusters pixels around
//! distance-map seeds by angular proximity. Everything runs on CPU with
//! hand-written forward and backward passes so gradients stay checkable.

pub mod clusterer;
pub mod datagen;
pub mod distfield;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod neighbors;
pub mod nnet;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
