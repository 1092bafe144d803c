//! Retrieval of in-context demonstrations for low-resource target languages:
//! BM25 candidate mining, scorer-labelled relevance training of a linear
//! retriever, cross-language parameter merging, DPP-based diverse selection,
//! prompt rendering and generation metrics.

// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod altmin;
pub mod bm25;
pub mod corpus;
pub mod dpp;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod prompt;
pub mod retriever;
pub mod scorer;
pub mod synth;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
