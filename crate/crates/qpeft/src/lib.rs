//! Desk-scale text reranking with query-dependent soft hints.
//!
//! A frozen miniature causal language model scores each candidate document by
//! the log-likelihood of the query conditioned on the document plus a small
//! block of learned "hint" embeddings produced by a trainable query-dependent
//! module. Candidates come from a BM25 retriever; reranking sorts them by the
//! query likelihood.
//!
//! Numeric code is generic over the scalar type: `f64` is the checking mode
//! (gradient verification, oracle tests), `f32` the run mode.

pub mod bm25;
pub mod error;
pub mod evalrank;
pub mod minilm;
pub mod numcore;
pub mod qdmodule;
pub mod textdata;
pub mod trainer;

pub use error::{Error, Result};

/// Double-precision matrix (checking mode).
pub type Mat64 = numcore::Matrix<f64>;
/// Single-precision matrix (run mode).
pub type Mat32 = numcore::Matrix<f32>;
