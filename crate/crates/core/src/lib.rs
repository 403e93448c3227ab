//! Contrastive equilibrium learning for self-supervised speaker embeddings.
//!
//! Embeddings are pushed toward a uniform (minimum-energy) distribution on the
//! unit hypersphere by a Gaussian-potential uniformity loss, while an angular
//! contrastive loss keeps two augmented crops of the same utterance together.
//! The crate also carries the supervised fine-tuning objectives, the log-Mel
//! front end, augmentation, a small trainable encoder, and EER/MinDCF scoring.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod features;
pub mod finetune;
pub mod gradcheck;
pub mod losses;
pub mod rng;
pub mod trainer;

pub use error::{CelError, Result};
