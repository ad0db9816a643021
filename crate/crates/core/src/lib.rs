//! Language-agnostic speaker embeddings: a speaker encoder and a language
//! encoder exchange information through prefix-tuned cross-attention, a
//! decoder reconstructs the input from the fused pair, and a four-term loss
//! pushes language information out of the speaker embedding.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod losses;
pub mod nn;
pub mod real;
pub mod rng;
pub mod synthcorpus;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
