//! Sequence-level temporal contrastive learning on precomputed embedding
//! sequences.
//!
//! A paragraph (sequence of caption embeddings) and its video (sequence of
//! clip embeddings) are compared as whole sequences through a monotone
//! alignment; negatives are produced by breaking the video's temporal order.

pub mod align;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod negatives;
pub mod rng;
pub mod seqcore;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
