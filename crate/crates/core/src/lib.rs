//! Speech-text dual-encoder retrieval from scratch.
//!
//! Speech frames are discretized with a k-means [`audio::Codebook`], offset
//! into a unified text+audio vocabulary ([`vocab`]), and encoded by a single
//! transformer ([`encoder`]) shared by both modalities. Training minimizes a
//! bidirectional in-batch contrastive loss plus a spreadout regularizer
//! ([`objectives`], [`trainer`]); [`eval`] measures R@1, retrieval-WER and
//! corpus BLEU.
//!
//! Data-parallel inner loops (k-means assignment, batch encoding, retrieval)
//! run on rayon when the `parallel` feature is enabled (the default) and fall
//! back to plain sequential iteration otherwise. Results are identical in both
//! modes: work is partitioned independently of the thread count and reduced in
//! a fixed order.

pub mod audio;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
mod fsutil;
pub mod eval;
pub mod numerics;
pub mod objectives;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
