//! Trie-constrained beam search and the title-then-passage retrieval
//! pipeline.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::config::DecodeConfig;
use crate::error::{Error, Result};
use crate::index::TrieIndex;
use crate::lm::{constrained_step, LanguageModel};
use crate::prompt::{PromptTemplates, SlotValues};
use crate::tokenization::{TokenId, EOS, SEP};
use crate::trie::{Cursor, TokenTrie};

/// A complete stored sequence produced by the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Stored sequence, without EOS.
    pub tokens: Vec<TokenId>,
    /// Constrained log-probability, the final EOS step included.
    pub logprob: f64,
    pub leaf_id: String,
    /// Whether the tail was appended by unique completion.
    pub terminated_early: bool,
}

/// One title/passage pair from [`retrieve`]. `title.leaf_id` is the doc id,
/// `passage.leaf_id` the passage id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCandidate {
    pub title: Candidate,
    pub passage: Candidate,
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    score: f64,
    cursor: Cursor,
    done: bool,
    early: bool,
}

impl Hyp {
    fn finish(&mut self, trie: &TokenTrie) -> bool {
        match trie.completion(self.cursor) {
            Some((rest, leaf)) => {
                self.early |= !matches!(self.cursor, Cursor::End(_));
                self.tokens.extend_from_slice(rest);
                self.cursor = Cursor::End(leaf);
                self.done = true;
                true
            }
            None => false,
        }
    }
}

/// Score descending, then token sequence ascending with finished sequences
/// compared as if EOS were appended. That key agrees with the final order
/// whether or not tails were filled in early.
fn rank_order(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| {
            let ka = a.tokens.iter().chain(a.done.then_some(&EOS));
            let kb = b.tokens.iter().chain(b.done.then_some(&EOS));
            ka.cmp(kb)
        })
}

/// Beam search over `trie` continuing `prompt`. Every step expands each live
/// hypothesis by every allowed token, scores it with the masked and
/// renormalized model distribution, and keeps the best `beam` of the pool;
/// finished hypotheses stay in the pool and compete for slots.
///
/// `max_len` bounds generated tokens (EOS excluded). Hypotheses that reach it
/// are finished by unique completion when possible and dropped otherwise.
pub fn constrained_beam_search(
    lm: &dyn LanguageModel,
    trie: &TokenTrie,
    prompt: &[TokenId],
    beam: usize,
    max_len: usize,
    early_termination: bool,
) -> Result<Vec<Candidate>> {
    if beam == 0 {
        return Err(Error::Config("beam must be >= 1".into()));
    }
    let root = trie.root().ok_or(Error::EmptyIndex)?;
    let mut start = Hyp {
        tokens: Vec::new(),
        score: 0.0,
        cursor: root,
        done: false,
        early: false,
    };
    if early_termination && trie.subtree_leaf_count(root) == 1 {
        start.finish(trie);
    }
    let mut hyps = vec![start];
    let mut ctx: Vec<TokenId> = Vec::with_capacity(prompt.len() + max_len);

    while hyps.iter().any(|h| !h.done) {
        let mut pool = Vec::with_capacity(hyps.len() * 2);
        for h in hyps {
            if h.done {
                pool.push(h);
                continue;
            }
            let exps = trie.expansions(h.cursor);
            let allowed: Vec<TokenId> = exps.iter().map(|&(t, _)| t).collect();
            ctx.clear();
            ctx.extend_from_slice(prompt);
            ctx.extend_from_slice(&h.tokens);
            let step = constrained_step(lm, &ctx, &allowed)?;
            for (&(t, cursor), lp) in exps.iter().zip(step) {
                let mut next = Hyp {
                    tokens: h.tokens.clone(),
                    score: h.score + lp,
                    cursor,
                    done: t == EOS,
                    early: false,
                };
                if !next.done {
                    next.tokens.push(t);
                    if early_termination && trie.subtree_leaf_count(cursor) == 1 {
                        next.finish(trie);
                    }
                }
                pool.push(next);
            }
        }
        pool.sort_by(rank_order);
        pool.truncate(beam);
        pool.retain_mut(|h| h.done || h.tokens.len() < max_len || h.finish(trie));
        if pool.is_empty() {
            return Err(Error::NoCompleteCandidate(max_len));
        }
        hyps = pool;
    }

    hyps.sort_by(rank_order);
    Ok(hyps
        .into_iter()
        .map(|h| {
            let Cursor::End(leaf) = h.cursor else {
                unreachable!("finished hypothesis ends at a leaf")
            };
            Candidate {
                tokens: h.tokens,
                logprob: h.score,
                leaf_id: trie.leaf_id(leaf).to_string(),
                terminated_early: h.early,
            }
        })
        .collect())
}

fn check_vocab(lm: &dyn LanguageModel, index: &TrieIndex) -> Result<()> {
    let (tokenizer, model) = (index.tokenizer().vocab_size(), lm.vocab_size());
    if tokenizer != model {
        return Err(Error::VocabMismatch { tokenizer, model });
    }
    Ok(())
}

/// Token prompt for title generation.
pub fn retrieval_prompt(index: &TrieIndex, prompts: &PromptTemplates, query: &str) -> Vec<TokenId> {
    let tok = index.tokenizer();
    let q = tok.encode(query);
    prompts.retrieval.render_tokens(
        tok,
        &SlotValues {
            query: Some(&q[..]),
            ..Default::default()
        },
    )
}

/// Token prompt for passage generation: the retrieval prompt, the title and
/// a separator.
pub fn passage_prompt(
    index: &TrieIndex,
    prompts: &PromptTemplates,
    query: &str,
    title_tokens: &[TokenId],
) -> Vec<TokenId> {
    let mut p = retrieval_prompt(index, prompts, query);
    p.extend_from_slice(title_tokens);
    p.push(SEP);
    p
}

pub fn generate_titles(
    lm: &dyn LanguageModel,
    index: &TrieIndex,
    prompts: &PromptTemplates,
    query: &str,
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    check_vocab(lm, index)?;
    let prompt = retrieval_prompt(index, prompts, query);
    constrained_beam_search(
        lm,
        index.title_trie(),
        &prompt,
        cfg.title_beam,
        cfg.max_title_tokens,
        cfg.early_termination,
    )
}

pub fn generate_passages(
    lm: &dyn LanguageModel,
    index: &TrieIndex,
    prompts: &PromptTemplates,
    query: &str,
    title: &Candidate,
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    check_vocab(lm, index)?;
    let trie = index
        .passage_trie(&title.leaf_id)
        .ok_or_else(|| Error::UnknownDocument(title.leaf_id.clone()))?;
    let prompt = passage_prompt(index, prompts, query, &title.tokens);
    constrained_beam_search(
        lm,
        trie,
        &prompt,
        cfg.passage_beam,
        cfg.max_passage_tokens,
        cfg.early_termination,
    )
}

/// Titles first, then passages under each title; pairs come out in title
/// rank order, then passage rank order, with repeated passage ids dropped.
pub fn retrieve(
    lm: &dyn LanguageModel,
    index: &TrieIndex,
    prompts: &PromptTemplates,
    query: &str,
    cfg: &DecodeConfig,
) -> Result<Vec<RetrievedCandidate>> {
    let titles = generate_titles(lm, index, prompts, query, cfg)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for title in titles {
        for passage in generate_passages(lm, index, prompts, query, &title, cfg)? {
            if seen.insert(passage.leaf_id.clone()) {
                out.push(RetrievedCandidate {
                    title: title.clone(),
                    passage,
                });
            }
        }
    }
    Ok(out)
}
