//! Multi-source weak-supervision label denoising for sequence tagging.
//!
//! K noisy token-level annotations are aggregated into one label sequence by
//! a hidden Markov model whose transition and emission tables are produced
//! per token from contextual embeddings, trained with generalized EM. The
//! result can be refined by alternating with a discriminative tagger trained
//! on the aggregator's soft labels.

pub mod alt;
pub mod chmm;
pub mod data;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod kernels;
pub mod labelspace;
pub mod neural;
pub mod refiner;
pub mod synth;

pub use error::{Error, Result};
