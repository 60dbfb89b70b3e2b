//! Engine configuration, loadable from TOML. Every section and key is
//! optional; missing values take the defaults below.
//!
//! ```toml
//! [corpus]
//! max_words = 200
//!
//! [decode]
//! title_beam = 5
//! passage_beam = 10
//! max_title_tokens = 64
//! max_passage_tokens = 256
//! early_termination = true
//!
//! [rank]
//! tau = 0.4
//! delta = 0.4
//! rejection_template = "cannot answer the query"
//! acceptance_template = "can answer the query"
//! length_normalize_titles = false
//! max_answer_tokens = 32
//!
//! [prompts]
//! retrieval = "query: {query} retrieve:"
//! assessment = "query: {query} title: {title} passage: {passage} assessment:"
//! rag = "query: {query} title: {title} passage: {passage} assessment: {acceptance} <sep>"
//!
//! [mixture]
//! same_doc_negatives = 1
//! other_doc_negatives = 3
//! retention = 0.5
//! seed = 42
//!
//! [lm]
//! order = 2
//! k = 0.1
//! timeout_ms = 30000
//!
//! [service]
//! listen = "127.0.0.1:8080"
//! request_timeout_ms = 60000
//! max_concurrent = 64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_MAX_WORDS;
use crate::error::{Error, Result};
use crate::lm::{DEFAULT_K, DEFAULT_ORDER};
use crate::prompt::PromptTemplates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Titles kept by the title beam.
    pub title_beam: usize,
    /// Passages kept by each per-title passage beam.
    pub passage_beam: usize,
    pub max_title_tokens: usize,
    pub max_passage_tokens: usize,
    /// Stop decoding once the prefix identifies a single stored sequence.
    pub early_termination: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            title_beam: 5,
            passage_beam: 10,
            max_title_tokens: 64,
            max_passage_tokens: 256,
            early_termination: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.title_beam == 0 || self.passage_beam == 0 {
            return Err(Error::Config("beam widths must be >= 1".into()));
        }
        if self.max_title_tokens == 0 || self.max_passage_tokens == 0 {
            return Err(Error::Config("max token limits must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankConfig {
    /// Temperature of the title-score softmax.
    pub tau: f64,
    /// Temperature of the assessment-score softmax.
    pub delta: f64,
    pub rejection_template: String,
    pub acceptance_template: String,
    /// Divide title log-probabilities by their token count before the
    /// softmax. Off by default.
    pub length_normalize_titles: bool,
    pub max_answer_tokens: usize,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            tau: 0.4,
            delta: 0.4,
            rejection_template: "cannot answer the query".into(),
            acceptance_template: "can answer the query".into(),
            length_normalize_titles: false,
            max_answer_tokens: 32,
        }
    }
}

impl RankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.rejection_template.trim().is_empty() || self.acceptance_template.trim().is_empty() {
            return Err(Error::Config("assessment templates must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    /// Negatives drawn from the gold passage's own document.
    pub same_doc_negatives: usize,
    /// Negatives drawn from other documents.
    pub other_doc_negatives: usize,
    /// Fraction of indexing examples kept in the second-stage mixture.
    pub retention: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            same_doc_negatives: 1,
            other_doc_negatives: 3,
            retention: 0.5,
            seed: 42,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.retention) {
            return Err(Error::Config(format!(
                "retention must be in [0, 1], got {}",
                self.retention
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub order: usize,
    pub k: f64,
    /// Per-request timeout for external models.
    pub timeout_ms: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            order: DEFAULT_ORDER,
            k: DEFAULT_K,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub max_words: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            max_words: DEFAULT_MAX_WORDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub listen: String,
    /// Wall-clock budget for one request, decoding included.
    pub request_timeout_ms: u64,
    /// Requests in flight beyond this are refused.
    pub max_concurrent: usize,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            listen: "127.0.0.1:8080".into(),
            request_timeout_ms: 60_000,
            max_concurrent: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub decode: DecodeConfig,
    pub rank: RankConfig,
    pub prompts: PromptTemplates,
    pub mixture: MixtureConfig,
    pub lm: LmConfig,
    pub service: ServiceSettings,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.max_words == 0 {
            return Err(Error::Config("max_words must be >= 1".into()));
        }
        self.decode.validate()?;
        self.rank.validate()?;
        self.prompts.validate()?;
        if self.service.max_concurrent == 0 {
            return Err(Error::Config("service.max_concurrent must be >= 1".into()));
        }
        self.mixture.validate()
    }

    /// Texts whose words the vocabulary must cover so that rendered prompts
    /// and training targets tokenize without unknowns.
    pub fn vocab_texts(&self) -> Vec<String> {
        let mut texts: Vec<String> = self
            .prompts
            .literal_words()
            .into_iter()
            .map(str::to_string)
            .collect();
        texts.push(self.rank.rejection_template.clone());
        texts.push(self.rank.acceptance_template.clone());
        texts
    }
}
