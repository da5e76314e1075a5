//! Context reconstruction for retrieval-augmented generation.
//!
//! The pipeline extends retrieve-then-generate with an intermediate
//! reconstruction step: a small trainable seq2seq model rewrites the
//! retrieved chunks into a concise, query-specific context before the
//! downstream generator sees them. The crate provides:
//!
//! - [`retrieval`]: chunk store, Okapi BM25 index, top-k search, precision@k
//! - [`metrics`]: exact match, unigram F1, ROUGE-L and their shared normalizers
//! - [`tokenizer`] / [`model`]: subword vocabulary and a CPU-trainable
//!   encoder-decoder transformer with exact gradients
//! - [`data_factory`]: teacher-generated gold contexts, bootstrapping,
//!   curation filters
//! - [`sft`] / [`cml`] / [`ppo`]: the three training stages
//! - [`pipeline`]: retrieve-reconstruct-generate execution
//! - [`experiments`]: noise/shuffle robustness, zero-shot transfer,
//!   token-length ablation, LLM-judge scoring, efficiency reports
//! - [`config`]: the run configuration shared by every CLI command

pub mod clients;
pub mod cml;
pub mod config;
pub mod data_factory;
pub mod entities;
pub mod experiments;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod ppo;
pub mod prompts;
pub mod retrieval;
pub mod sft;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("teacher client error: {0}")]
    Teacher(String),
    #[error("generator client error: {0}")]
    Generator(String),
    #[error("curation error: {0}")]
    Curation(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
