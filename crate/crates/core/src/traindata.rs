//! Training corpora for an external fine-tuning stack, written as JSONL
//! `{kind, input, target, meta}`.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{MixtureConfig, RankConfig};
use crate::corpus::{split_sentences, CorpusStore, Passage};
use crate::prompt::{PromptTemplates, SlotValues};
use crate::qrels::{QrelRow, Qrels};
use crate::tokenization::SEP_LITERAL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Indexing,
    Retrieval,
    RerankingPos,
    RerankingNegSameDoc,
    RerankingNegOtherDoc,
    Rag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub doc_id: String,
    pub passage_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub kind: ExampleKind,
    pub input: String,
    pub target: String,
    pub meta: ExampleMeta,
}

/// Examples plus one message per skipped input row.
#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub examples: Vec<TrainingExample>,
    pub warnings: Vec<String>,
}

fn meta(p: &Passage, query_id: Option<&str>) -> ExampleMeta {
    ExampleMeta {
        doc_id: p.doc_id.clone(),
        passage_id: p.passage_id.clone(),
        query_id: query_id.map(str::to_string),
    }
}

/// Sentence to source passage, one example per sentence, in corpus order.
pub fn gen_indexing_examples(store: &CorpusStore) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for p in store.passages() {
        for s in split_sentences(&p.text) {
            out.push(TrainingExample {
                kind: ExampleKind::Indexing,
                input: s.text,
                target: p.text.clone(),
                meta: meta(p, None),
            });
        }
    }
    out
}

fn resolve<'a>(store: &'a CorpusStore, row: &QrelRow, warnings: &mut Vec<String>) -> Option<&'a Passage> {
    let p = store.passage(&row.gold_passage_id);
    if p.is_none() {
        warnings.push(format!(
            "query {}: gold passage {:?} not in corpus, skipped",
            row.query_id, row.gold_passage_id
        ));
    }
    p
}

fn assessment_input(prompts: &PromptTemplates, query: &str, p: &Passage) -> String {
    prompts.assessment.render(&SlotValues {
        query: Some(query),
        title: Some(&p.title),
        passage: Some(&p.text),
        acceptance: None,
    })
}

/// Query to `title <sep> passage`.
pub fn gen_retrieval_examples(qrels: &Qrels, store: &CorpusStore, prompts: &PromptTemplates) -> Generated {
    let mut g = Generated::default();
    for row in qrels.rows() {
        let Some(p) = resolve(store, row, &mut g.warnings) else { continue };
        g.examples.push(TrainingExample {
            kind: ExampleKind::Retrieval,
            input: prompts.retrieval.render(&SlotValues {
                query: Some(&row.query),
                ..Default::default()
            }),
            target: format!("{} {SEP_LITERAL} {}", p.title, p.text),
            meta: meta(p, Some(&row.query_id)),
        });
    }
    g
}

/// Per qrel: the gold passage labelled with the acceptance phrase, then
/// same-document and other-document negatives labelled with the rejection
/// phrase, sampled uniformly without replacement.
pub fn gen_reranking_examples(
    qrels: &Qrels,
    store: &CorpusStore,
    prompts: &PromptTemplates,
    rank: &RankConfig,
    mix: &MixtureConfig,
) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(mix.seed);
    let passages = store.passages();
    let mut g = Generated::default();
    for row in qrels.rows() {
        let Some(gold) = resolve(store, row, &mut g.warnings) else { continue };
        let qid = Some(row.query_id.as_str());
        g.examples.push(TrainingExample {
            kind: ExampleKind::RerankingPos,
            input: assessment_input(prompts, &row.query, gold),
            target: rank.acceptance_template.clone(),
            meta: meta(gold, qid),
        });

        let range = store
            .passage_range(&gold.doc_id)
            .expect("gold passage's document is in the store");
        let siblings: Vec<usize> = range
            .clone()
            .filter(|&i| passages[i].passage_id != gold.passage_id)
            .collect();
        let take = mix.same_doc_negatives.min(siblings.len());
        for i in index::sample(&mut rng, siblings.len(), take) {
            let p = &passages[siblings[i]];
            g.examples.push(TrainingExample {
                kind: ExampleKind::RerankingNegSameDoc,
                input: assessment_input(prompts, &row.query, p),
                target: rank.rejection_template.clone(),
                meta: meta(p, qid),
            });
        }

        // Indices outside the gold document's contiguous range.
        let others = passages.len() - range.len();
        let take = mix.other_doc_negatives.min(others);
        for i in index::sample(&mut rng, others, take) {
            let p = &passages[if i < range.start { i } else { i + range.len() }];
            g.examples.push(TrainingExample {
                kind: ExampleKind::RerankingNegOtherDoc,
                input: assessment_input(prompts, &row.query, p),
                target: rank.rejection_template.clone(),
                meta: meta(p, qid),
            });
        }
    }
    g
}

/// Positive assessment followed by the gold answer:
/// `acceptance <sep> answer`.
pub fn gen_rag_examples(
    qrels: &Qrels,
    store: &CorpusStore,
    prompts: &PromptTemplates,
    rank: &RankConfig,
) -> Generated {
    let mut g = Generated::default();
    for row in qrels.rows() {
        let answer = row.answer.as_deref().map(str::trim).unwrap_or("");
        if answer.is_empty() {
            g.warnings
                .push(format!("query {}: no answer, skipped", row.query_id));
            continue;
        }
        let Some(p) = resolve(store, row, &mut g.warnings) else { continue };
        g.examples.push(TrainingExample {
            kind: ExampleKind::Rag,
            input: assessment_input(prompts, &row.query, p),
            target: format!("{} {SEP_LITERAL} {answer}", rank.acceptance_template),
            meta: meta(p, Some(&row.query_id)),
        });
    }
    g
}

/// Second-stage mixture: `floor(retention * |indexing|)` indexing examples
/// sampled uniformly, every supervised example, shuffled. Seeded.
pub fn build_stage2_mixture(
    indexing: &[TrainingExample],
    retrieval: &[TrainingExample],
    reranking: &[TrainingExample],
    rag: &[TrainingExample],
    cfg: &MixtureConfig,
) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keep = ((cfg.retention * indexing.len() as f64).floor() as usize).min(indexing.len());
    let mut picked = index::sample(&mut rng, indexing.len(), keep).into_vec();
    picked.sort_unstable();
    let mut out: Vec<TrainingExample> = picked.into_iter().map(|i| indexing[i].clone()).collect();
    out.extend(retrieval.iter().cloned());
    out.extend(reranking.iter().cloned());
    out.extend(rag.iter().cloned());
    out.shuffle(&mut rng);
    out
}

pub fn write_jsonl(mut w: impl Write, examples: &[TrainingExample]) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
