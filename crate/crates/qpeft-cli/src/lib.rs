//! Command-line driver for the hint-conditioned reranking pipeline: data
//! generation, vocabulary and index building, BM25 retrieval, language-model
//! pretraining, hint-module training, reranking, evaluation, gradient
//! checking, and the study sweep. All commands are file-in, file-out and
//! reproducible byte-for-byte from the same settings.

pub mod commands;
pub mod settings;

pub use commands::run;
pub use settings::{Settings, Source};
