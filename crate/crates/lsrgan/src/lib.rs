//! Feature-generating conditional WGAN for zero-shot learning.
//!
//! The generator synthesizes visual feature vectors from noise plus a
//! per-class semantic vector; a two-headed discriminator provides the
//! critic and an all-class softmax classifier. A semantic-relationship
//! penalty keeps the cosine similarities of generated class centroids
//! inside a soft band around the corresponding semantic similarities,
//! which transfers inter-class structure to classes that have no real
//! visual samples.
//!
//! The crate ships its own reverse-mode autodiff engine (second-order
//! capable, for the critic's input-gradient penalty), a synthetic
//! shared-latent dataset generator for desk-scale verification, the full
//! ZSL/GZSL evaluation suite, and a CLI driving the whole pipeline.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub(crate) mod rand_util;
pub mod similarity;
pub mod training;

pub use autodiff::{NodeId, Tape, Tensor};
pub use error::{Error, Result};
