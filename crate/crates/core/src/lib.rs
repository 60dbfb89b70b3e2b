//! Generative retrieval over a token trie.
//!
//! A corpus is chunked into passages and indexed as prefix trees over titles
//! and passages. Retrieval generates titles, then passages, under
//! trie-constrained beam search from a pluggable language model, so every
//! result is an exact corpus passage. Candidates are reranked by combining a
//! temperature-scaled title score with the model's own assessment of whether
//! the passage answers the query.

pub mod config;
pub mod corpus;
pub mod decode;
pub mod engine;
pub mod error;
pub mod eval;
pub mod index;
pub mod lm;
pub mod prompt;
pub mod qrels;
pub mod rank;
pub mod tokenization;
pub mod traindata;
pub mod trie;

pub use config::Config;
pub use engine::Engine;
pub use error::{Error, Result};
