//! Self-supervised dense retriever training through batch-conditioned
//! language modeling.
//!
//! A retriever scores every pair of chunks in a batch; a dual-stream language
//! model predicts each chunk's next tokens while attending to the other
//! chunks in proportion to those scores. The language-modeling loss trains
//! both networks jointly.

// `!(x > 0.0)` is used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evalretrieval;
pub mod numkernel;
pub mod retriever;
pub mod rng;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use numkernel::{Tape, Tensor, Var};
