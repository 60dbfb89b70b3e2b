//! Self-assessment reranking: a temperature softmax over title
//! log-probabilities times a temperature softmax over one minus the model's
//! probability of rejecting the passage.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RankConfig;
use crate::decode::{retrieval_prompt, RetrievedCandidate};
use crate::error::{Error, Result};
use crate::index::TrieIndex;
use crate::lm::{sequence_logprob, Constraint, LanguageModel};
use crate::prompt::{PromptTemplates, SlotValues};
use crate::tokenization::{TokenId, Tokenizer, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub passage_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub title_logprob: f64,
    pub rejection_prob: f64,
    pub title_score: f64,
    pub assessment_score: f64,
    /// `title_score * assessment_score`, not renormalized.
    pub score: f64,
    pub rank: usize,
}

/// A passage from some other retriever, for [`rerank_external`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalPassage {
    pub passage_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagAnswer {
    pub answer: String,
    pub passage_id: String,
    /// Generation hit `max_answer_tokens` before EOS.
    pub truncated: bool,
}

fn softmax_scaled(xs: &[f64], temperature: f64, what: &str) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("{what} must be > 0, got {temperature}")));
    }
    let scaled: Vec<f64> = xs.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `softmax(logprob / tau)` over the candidate set.
pub fn title_scores(title_logprobs: &[f64], tau: f64) -> Result<Vec<f64>> {
    softmax_scaled(title_logprobs, tau, "tau")
}

/// `softmax((1 - rejection) / delta)` over the candidate set.
pub fn assessment_scores(rejection_probs: &[f64], delta: f64) -> Result<Vec<f64>> {
    let accept: Vec<f64> = rejection_probs.iter().map(|r| 1.0 - r).collect();
    softmax_scaled(&accept, delta, "delta")
}

pub fn final_scores(title: &[f64], assessment: &[f64]) -> Result<Vec<f64>> {
    if title.len() != assessment.len() {
        return Err(Error::LengthMismatch(title.len(), assessment.len()));
    }
    Ok(title.iter().zip(assessment).map(|(a, b)| a * b).collect())
}

fn assessment_prompt(
    tok: &Tokenizer,
    prompts: &PromptTemplates,
    query: &[TokenId],
    title: &[TokenId],
    passage: &[TokenId],
) -> Vec<TokenId> {
    prompts.assessment.render_tokens(
        tok,
        &SlotValues {
            query: Some(query),
            title: Some(title),
            passage: Some(passage),
            acceptance: None,
        },
    )
}

fn rejection_prob_tokens(
    lm: &dyn LanguageModel,
    tok: &Tokenizer,
    prompts: &PromptTemplates,
    cfg: &RankConfig,
    query: &[TokenId],
    title: &[TokenId],
    passage: &[TokenId],
) -> Result<f64> {
    let prompt = assessment_prompt(tok, prompts, query, title, passage);
    let rejection = tok.encode(&cfg.rejection_template);
    Ok(sequence_logprob(lm, &prompt, &rejection, None)?.exp())
}

/// Joint probability of the rejection phrase after the assessment prompt.
pub fn rejection_prob(
    lm: &dyn LanguageModel,
    tok: &Tokenizer,
    prompts: &PromptTemplates,
    cfg: &RankConfig,
    query: &str,
    title: &str,
    passage: &str,
) -> Result<f64> {
    rejection_prob_tokens(
        lm,
        tok,
        prompts,
        cfg,
        &tok.encode(query),
        &tok.encode(title),
        &tok.encode(passage),
    )
}

struct Pending {
    passage_id: String,
    doc_id: String,
    title: String,
    text: String,
    title_logprob: f64,
    title_len: usize,
    rejection_prob: f64,
}

fn score_and_sort(items: Vec<Pending>, cfg: &RankConfig) -> Result<Vec<ScoredPassage>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let title_inputs: Vec<f64> = items
        .iter()
        .map(|p| {
            if cfg.length_normalize_titles {
                p.title_logprob / (p.title_len + 1) as f64
            } else {
                p.title_logprob
            }
        })
        .collect();
    let rejections: Vec<f64> = items.iter().map(|p| p.rejection_prob).collect();
    let st = title_scores(&title_inputs, cfg.tau)?;
    let sp = assessment_scores(&rejections, cfg.delta)?;
    let s = final_scores(&st, &sp)?;
    let mut out: Vec<ScoredPassage> = items
        .into_iter()
        .enumerate()
        .map(|(i, p)| ScoredPassage {
            passage_id: p.passage_id,
            doc_id: p.doc_id,
            title: p.title,
            text: p.text,
            title_logprob: p.title_logprob,
            rejection_prob: p.rejection_prob,
            title_score: st[i],
            assessment_score: sp[i],
            score: s[i],
            rank: 0,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.title_logprob.total_cmp(&a.title_logprob))
            .then_with(|| a.passage_id.cmp(&b.passage_id))
    });
    for (i, p) in out.iter_mut().enumerate() {
        p.rank = i + 1;
    }
    Ok(out)
}

/// Scores and orders the decoder's own candidates.
pub fn rerank(
    candidates: &[RetrievedCandidate],
    lm: &dyn LanguageModel,
    index: &TrieIndex,
    prompts: &PromptTemplates,
    query: &str,
    cfg: &RankConfig,
) -> Result<Vec<ScoredPassage>> {
    let tok = index.tokenizer();
    let q = tok.encode(query);
    let mut items = Vec::with_capacity(candidates.len());
    for c in candidates {
        items.push(Pending {
            passage_id: c.passage.leaf_id.clone(),
            doc_id: c.title.leaf_id.clone(),
            title: tok.decode(&c.title.tokens)?,
            text: tok.decode(&c.passage.tokens)?,
            title_logprob: c.title.logprob,
            title_len: c.title.tokens.len(),
            rejection_prob: rejection_prob_tokens(
                lm,
                tok,
                prompts,
                cfg,
                &q,
                &c.title.tokens,
                &c.passage.tokens,
            )?,
        });
    }
    score_and_sort(items, cfg)
}

/// Log-probability of a title after the retrieval prompt, EOS included.
/// Titles stored in the index are scored under the title trie constraint,
/// exactly as the decoder scores them; other titles are scored freely.
pub fn title_logprob(
    lm: &dyn LanguageModel,
    index: &TrieIndex,
    prompts: &PromptTemplates,
    query: &str,
    title: &[TokenId],
) -> Result<f64> {
    let prompt = retrieval_prompt(index, prompts, query);
    let mut seq = title.to_vec();
    seq.push(EOS);
    let trie = index.title_trie();
    let constraint = trie.lookup(title).map(|_| Constraint { trie, anchor: &[] });
    sequence_logprob(lm, &prompt, &seq, constraint)
}

/// Standalone reranker for passages retrieved by any other system.
pub fn rerank_external(
    passages: &[ExternalPassage],
    lm: &dyn LanguageModel,
    index: &TrieIndex,
    prompts: &PromptTemplates,
    query: &str,
    cfg: &RankConfig,
) -> Result<Vec<ScoredPassage>> {
    let mut seen = HashSet::new();
    for p in passages {
        if !seen.insert(p.passage_id.as_str()) {
            return Err(Error::DuplicateCandidate(p.passage_id.clone()));
        }
    }
    let tok = index.tokenizer();
    let q = tok.encode(query);
    let mut items = Vec::with_capacity(passages.len());
    for p in passages {
        let title = tok.encode(&p.title);
        let text = tok.encode(&p.text);
        let doc_id = match index.title_trie().lookup(&title) {
            Some(d) => d.to_string(),
            None => p
                .passage_id
                .rsplit_once('#')
                .map_or(p.passage_id.as_str(), |(d, _)| d)
                .to_string(),
        };
        items.push(Pending {
            passage_id: p.passage_id.clone(),
            doc_id,
            title: tok.decode(&title)?,
            text: tok.decode(&text)?,
            title_logprob: title_logprob(lm, index, prompts, query, &title)?,
            title_len: title.len(),
            rejection_prob: rejection_prob_tokens(lm, tok, prompts, cfg, &q, &title, &text)?,
        });
    }
    score_and_sort(items, cfg)
}

/// Greedy answer generation after the acceptance phrase. Ties in the argmax
/// go to the lowest token id.
pub fn generate_answer(
    lm: &dyn LanguageModel,
    tok: &Tokenizer,
    prompts: &PromptTemplates,
    cfg: &RankConfig,
    query: &str,
    top: &ScoredPassage,
) -> Result<RagAnswer> {
    let (q, t, p, a) = (
        tok.encode(query),
        tok.encode(&top.title),
        tok.encode(&top.text),
        tok.encode(&cfg.acceptance_template),
    );
    let mut ctx = prompts.rag.render_tokens(
        tok,
        &SlotValues {
            query: Some(&q[..]),
            title: Some(&t[..]),
            passage: Some(&p[..]),
            acceptance: Some(&a[..]),
        },
    );
    let start = ctx.len();
    let mut truncated = true;
    for _ in 0..cfg.max_answer_tokens {
        let lps = lm.next_logprobs(&ctx)?;
        let mut best = 0usize;
        for (i, &lp) in lps.iter().enumerate() {
            if lp > lps[best] {
                best = i;
            }
        }
        if best as TokenId == EOS {
            truncated = false;
            break;
        }
        ctx.push(best as TokenId);
    }
    Ok(RagAnswer {
        answer: tok.decode(&ctx[start..])?,
        passage_id: top.passage_id.clone(),
        truncated,
    })
}

/// One line per result: `query_id Q0 passage_id rank score run_tag`.
pub fn write_run(
    mut w: impl Write,
    query_id: &str,
    results: &[ScoredPassage],
    run_tag: &str,
) -> std::io::Result<()> {
    for r in results {
        writeln!(w, "{query_id} Q0 {} {} {:.6} {run_tag}", r.passage_id, r.rank, r.score)?;
    }
    Ok(())
}
