//! A loaded index plus model plus configuration, with the full
//! retrieve, rerank and answer pipeline.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::decode::retrieve;
use crate::error::{Error, Result};
use crate::index::TrieIndex;
use crate::lm::{ExternalLm, LanguageModel, NGramLm, UniformLm};
use crate::rank::{generate_answer, rerank, rerank_external, ExternalPassage, RagAnswer, ScoredPassage};

/// Opens a model from a descriptor:
/// `uniform`, `ngram:<model file>`, `cmd:<shell command>`, or an
/// `http://` / `https://` base URL. A bare path is read as an n-gram file.
pub fn open_lm(descriptor: &str, vocab_size: usize, timeout: Duration) -> Result<Arc<dyn LanguageModel>> {
    let lm: Arc<dyn LanguageModel> = if descriptor == "uniform" {
        Arc::new(UniformLm::new(vocab_size))
    } else if let Some(cmd) = descriptor.strip_prefix("cmd:") {
        Arc::new(ExternalLm::subprocess(cmd, vocab_size, timeout)?)
    } else if descriptor.starts_with("http://") || descriptor.starts_with("https://") {
        Arc::new(ExternalLm::http(descriptor, vocab_size, timeout))
    } else {
        let path = descriptor.strip_prefix("ngram:").unwrap_or(descriptor);
        Arc::new(NGramLm::load(Path::new(path))?)
    };
    if lm.vocab_size() != vocab_size {
        return Err(Error::VocabMismatch {
            tokenizer: vocab_size,
            model: lm.vocab_size(),
        });
    }
    Ok(lm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResult {
    pub answer: RagAnswer,
    pub results: Vec<ScoredPassage>,
}

#[derive(Clone)]
pub struct Engine {
    pub index: Arc<TrieIndex>,
    pub lm: Arc<dyn LanguageModel>,
    pub config: Config,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("lm", &self.lm.descriptor())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(index: Arc<TrieIndex>, lm: Arc<dyn LanguageModel>, config: Config) -> Result<Self> {
        config.validate()?;
        let (tokenizer, model) = (index.tokenizer().vocab_size(), lm.vocab_size());
        if tokenizer != model {
            return Err(Error::VocabMismatch { tokenizer, model });
        }
        Ok(Engine { index, lm, config })
    }

    /// Retrieves and reranks; returns every candidate, best first.
    pub fn search(&self, query: &str) -> Result<Vec<ScoredPassage>> {
        if self.index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let c = &self.config;
        let candidates = retrieve(&*self.lm, &self.index, &c.prompts, query, &c.decode)?;
        rerank(&candidates, &*self.lm, &self.index, &c.prompts, query, &c.rank)
    }

    pub fn rerank_external(&self, query: &str, passages: &[ExternalPassage]) -> Result<Vec<ScoredPassage>> {
        let c = &self.config;
        rerank_external(passages, &*self.lm, &self.index, &c.prompts, query, &c.rank)
    }

    /// Searches, then answers from the rank-1 passage.
    pub fn answer(&self, query: &str) -> Result<AnswerResult> {
        let results = self.search(query)?;
        let top = results.first().ok_or(Error::EmptyIndex)?;
        let c = &self.config;
        let answer = generate_answer(
            &*self.lm,
            self.index.tokenizer(),
            &c.prompts,
            &c.rank,
            query,
            top,
        )?;
        Ok(AnswerResult { answer, results })
    }
}
