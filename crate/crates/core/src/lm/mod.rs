//! Language-model interface: next-token log-probabilities over the shared
//! vocabulary, plus the masked-and-renormalized scoring used under trie
//! constraints.

mod external;
mod ngram;

pub use external::{densify, ExternalLm, LmRequest, LmResponse, PROTOCOL_VERSION};
pub use ngram::{NGramLm, DEFAULT_K, DEFAULT_ORDER};

use std::time::Duration;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tokenization::TokenId;
use crate::trie::{Cursor, TokenTrie};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("language model timed out after {0:?}")]
    Timeout(Duration),
    #[error("language model transport failed: {0}")]
    Transport(String),
    #[error("malformed language model response: {0}")]
    Shape(String),
    #[error("context token {0} is outside the vocabulary")]
    BadContext(TokenId),
}

impl LmError {
    /// Timeouts and transport failures may succeed on retry.
    pub fn is_retriable(&self) -> bool {
        matches!(self, LmError::Timeout(_) | LmError::Transport(_))
    }
}

pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of every vocabulary token following `context`.
    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError>;

    /// Log-probabilities (normalized over the whole vocabulary) of just the
    /// given tokens. Models that can answer this without materializing the
    /// full distribution should override it.
    fn token_logprobs(&self, context: &[TokenId], tokens: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let all = self.next_logprobs(context)?;
        tokens
            .iter()
            .map(|&t| {
                all.get(t as usize)
                    .copied()
                    .ok_or_else(|| LmError::Shape(format!("no entry for token {t}")))
            })
            .collect()
    }

    /// Human-readable description of the backing model.
    fn descriptor(&self) -> String;
}

/// Equal probability for every token.
#[derive(Debug, Clone)]
pub struct UniformLm {
    vocab_size: usize,
}

impl UniformLm {
    pub fn new(vocab_size: usize) -> Self {
        UniformLm { vocab_size }
    }
}

impl LanguageModel for UniformLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logprobs(&self, _context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        Ok(vec![-(self.vocab_size as f64).ln(); self.vocab_size])
    }

    fn token_logprobs(&self, _context: &[TokenId], tokens: &[TokenId]) -> Result<Vec<f64>, LmError> {
        Ok(vec![-(self.vocab_size as f64).ln(); tokens.len()])
    }

    fn descriptor(&self) -> String {
        format!("uniform(vocab={})", self.vocab_size)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-probabilities of `allowed` under the model, renormalized over
/// `allowed`. A singleton set has probability one and needs no model call.
pub fn constrained_step(
    lm: &dyn LanguageModel,
    context: &[TokenId],
    allowed: &[TokenId],
) -> Result<Vec<f64>, LmError> {
    if allowed.len() == 1 {
        return Ok(vec![0.0]);
    }
    let lps = lm.token_logprobs(context, allowed)?;
    if lps.len() != allowed.len() {
        return Err(LmError::Shape(format!(
            "expected {} log-probs, got {}",
            allowed.len(),
            lps.len()
        )));
    }
    let norm = logsumexp(&lps);
    Ok(lps.into_iter().map(|lp| lp - norm).collect())
}

/// A trie constraint for [`sequence_logprob`]: the continuation must extend
/// `anchor` along a path of `trie`.
#[derive(Debug, Clone, Copy)]
pub struct Constraint<'a> {
    pub trie: &'a TokenTrie,
    pub anchor: &'a [TokenId],
}

/// Sum of per-step log-probabilities of `continuation` after `context`.
/// Under a constraint each step is renormalized over the trie's allowed set.
pub fn sequence_logprob(
    lm: &dyn LanguageModel,
    context: &[TokenId],
    continuation: &[TokenId],
    constraint: Option<Constraint<'_>>,
) -> Result<f64> {
    let mut ctx = Vec::with_capacity(context.len() + continuation.len());
    ctx.extend_from_slice(context);
    let mut total = 0.0;
    match constraint {
        None => {
            for &t in continuation {
                total += lm.token_logprobs(&ctx, &[t])?[0];
                ctx.push(t);
            }
        }
        Some(c) => {
            let mut cursor: Cursor = c.trie.walk(c.anchor)?;
            for &t in continuation {
                let allowed = c.trie.allowed(cursor);
                let idx = allowed.binary_search(&t).map_err(|_| Error::InvalidPrefix)?;
                total += constrained_step(lm, &ctx, &allowed)?[idx];
                cursor = c.trie.advance(cursor, t).ok_or(Error::InvalidPrefix)?;
                ctx.push(t);
            }
        }
    }
    Ok(total)
}
