//! Fixtures, synthetic corpora, toy models and independent oracles shared by
//! the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfret::corpus::{CorpusStore, Document};
use selfret::eval::{parse_answers, Golds, RunFile};
use selfret::qrels::Qrels;
use selfret::lm::{LanguageModel, LmError};
use selfret::tokenization::{TokenId, EOS};

pub fn doc(id: &str, title: &str, text: &str) -> Document {
    Document {
        doc_id: id.into(),
        title: title.into(),
        text: text.into(),
    }
}

/// The three-document desk corpus.
pub fn f1_docs() -> Vec<Document> {
    vec![
        doc("d1", "apple pie", "apple pie is sweet. apple pie uses flour."),
        doc("d2", "apple tree", "apple tree grows tall."),
        doc("d3", "banana bread", "banana bread is moist."),
    ]
}

pub fn f1_store(max_words: usize) -> CorpusStore {
    CorpusStore::from_documents(f1_docs(), max_words).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

/// Random sentence of `n` words from a `vocab`-word lexicon, ending in a
/// terminator.
pub fn sentence(r: &mut ChaCha8Rng, n: usize, vocab: usize) -> String {
    let mut words: Vec<String> = (0..n).map(|_| word(r.random_range(0..vocab))).collect();
    let end = ['.', '!', '?'][r.random_range(0..3)];
    words.last_mut().unwrap().push(end);
    words.join(" ")
}

/// Documents with 1..=`max_sentences` sentences of 1..=`max_sentence_words`
/// words and distinct titles. Whitespace is made irregular on purpose.
pub fn synthetic_docs(
    seed: u64,
    n_docs: usize,
    max_sentences: usize,
    max_sentence_words: usize,
    vocab: usize,
) -> Vec<Document> {
    let mut r = rng(seed);
    (0..n_docs)
        .map(|i| {
            let n = r.random_range(1..=max_sentences);
            let seps = [" ", "  ", "\n", " \t "];
            let mut text = String::new();
            for s in 0..n {
                if s > 0 {
                    text.push_str(seps[r.random_range(0..seps.len())]);
                }
                let len = r.random_range(1..=max_sentence_words);
                text.push_str(&sentence(&mut r, len, vocab));
            }
            let title_len = r.random_range(1..=3);
            let mut title: Vec<String> = (0..title_len).map(|_| word(r.random_range(0..vocab))).collect();
            title.push(format!("t{i}"));
            doc(&format!("doc{i}"), &title.join(" "), &text)
        })
        .collect()
}

/// Random queries over the same lexicon.
pub fn synthetic_queries(seed: u64, n: usize, vocab: usize) -> Vec<String> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let len = r.random_range(1..=5);
            (0..len)
                .map(|_| word(r.random_range(0..vocab)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Up to `max_leaves` random sequences over a small alphabet, so prefixes
/// are shared often and some sequences are prefixes of others. Duplicates
/// are removed, keeping the first.
pub fn random_sequences(seed: u64, max_leaves: usize, alphabet: usize, max_len: usize) -> Vec<(String, Vec<TokenId>)> {
    let mut r = rng(seed);
    let n = r.random_range(1..=max_leaves);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for i in 0..n {
        let len = r.random_range(1..=max_len);
        let seq: Vec<TokenId> = (0..len)
            .map(|_| 5 + r.random_range(0..alphabet as TokenId))
            .collect();
        if seen.insert(seq.clone()) {
            out.push((format!("s{i}"), seq));
        }
    }
    out
}

/// Deterministic model whose distribution depends on the whole context
/// through a hash; no two contexts share a distribution by construction.
#[derive(Debug, Clone)]
pub struct HashLm {
    pub vocab: usize,
    pub salt: u64,
}

impl HashLm {
    fn logits(&self, context: &[TokenId]) -> Vec<f64> {
        let mut h: u64 = 0xcbf29ce484222325 ^ self.salt;
        for &t in context {
            h ^= t as u64 + 1;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut r = ChaCha8Rng::seed_from_u64(h);
        (0..self.vocab).map(|_| r.random_range(-4.0..4.0)).collect()
    }
}

impl LanguageModel for HashLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let l = self.logits(context);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        Ok(l.into_iter().map(|x| x - z).collect())
    }

    fn descriptor(&self) -> String {
        format!("hash(salt={})", self.salt)
    }
}

/// Continues any context that starts with a registered prompt with that
/// prompt's scripted tokens and then EOS (probability 0.9 each step);
/// uniform elsewhere.
#[derive(Debug, Clone, Default)]
pub struct ScriptedLm {
    pub vocab: usize,
    pub scripts: Vec<(Vec<TokenId>, Vec<TokenId>)>,
}

impl LanguageModel for ScriptedLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let uniform = vec![-(self.vocab as f64).ln(); self.vocab];
        let hit = self
            .scripts
            .iter()
            .filter(|(p, _)| context.starts_with(p))
            .max_by_key(|(p, _)| p.len());
        let Some((prompt, script)) = hit else { return Ok(uniform) };
        let pos = context.len() - prompt.len();
        if context[prompt.len()..] != script[..pos.min(script.len())] {
            return Ok(uniform);
        }
        let next = script.get(pos).copied().unwrap_or(EOS);
        let rest = (0.1 / (self.vocab - 1) as f64).ln();
        let mut out = vec![rest; self.vocab];
        out[next as usize] = 0.9f64.ln();
        Ok(out)
    }

    fn descriptor(&self) -> String {
        "scripted".into()
    }
}

/// Exhaustive reference ranking: every stored sequence scored step by step
/// with the full model distribution masked to the tokens that continue some
/// stored sequence (EOS where one ends) and renormalized, then sorted by
/// score descending and sequence-with-EOS ascending. Works from the raw
/// sequence list, not the trie.
pub fn oracle_ranking(
    lm: &dyn LanguageModel,
    prompt: &[TokenId],
    seqs: &[(String, Vec<TokenId>)],
) -> Vec<(String, Vec<TokenId>, f64)> {
    let full: Vec<Vec<TokenId>> = seqs
        .iter()
        .map(|(_, s)| s.iter().copied().chain([EOS]).collect())
        .collect();
    let mut out: Vec<(String, Vec<TokenId>, f64)> = Vec::new();
    for ((id, seq), f) in seqs.iter().zip(&full) {
        let mut score = 0.0;
        for i in 0..f.len() {
            let allowed: BTreeSet<TokenId> = full
                .iter()
                .filter(|g| g.len() > i && g[..i] == f[..i])
                .map(|g| g[i])
                .collect();
            if allowed.len() == 1 {
                continue;
            }
            let mut ctx = prompt.to_vec();
            ctx.extend_from_slice(&f[..i]);
            let lps = lm.next_logprobs(&ctx).unwrap();
            let mass: f64 = allowed.iter().map(|&a| lps[a as usize].exp()).sum();
            score += lps[f[i] as usize] - mass.ln();
        }
        out.push((id.clone(), seq.clone(), score));
    }
    out.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap().then_with(|| {
            let ka: Vec<TokenId> = a.1.iter().copied().chain([EOS]).collect();
            let kb: Vec<TokenId> = b.1.iter().copied().chain([EOS]).collect();
            ka.cmp(&kb)
        })
    });
    out
}

/// Checks a decoder ranking against the oracle: same sequences, scores
/// within `tol`, order non-increasing in oracle score up to `tol`, and
/// exactly tied decoder scores ordered by sequence-with-EOS.
pub fn matches_oracle(
    got: &[(String, Vec<TokenId>, f64)],
    want: &[(String, Vec<TokenId>, f64)],
    tol: f64,
) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{} candidates, oracle has {}", got.len(), want.len()));
    }
    let oracle: HashMap<&Vec<TokenId>, f64> = want.iter().map(|(_, s, sc)| (s, *sc)).collect();
    for (id, seq, score) in got {
        let Some(&o) = oracle.get(seq) else {
            return Err(format!("{id} {seq:?} not in oracle set"));
        };
        if (o - score).abs() > tol {
            return Err(format!("{id}: score {score} vs oracle {o}"));
        }
    }
    for w in got.windows(2) {
        let (a, b) = (oracle[&w[0].1], oracle[&w[1].1]);
        if a < b - tol {
            return Err(format!("{} ranked above {} with lower score", w[0].0, w[1].0));
        }
        if w[0].2 == w[1].2 {
            let ka: Vec<TokenId> = w[0].1.iter().copied().chain([EOS]).collect();
            let kb: Vec<TokenId> = w[1].1.iter().copied().chain([EOS]).collect();
            if ka > kb {
                return Err(format!("tie between {} and {} broken wrongly", w[0].0, w[1].0));
            }
        }
    }
    Ok(())
}

/// Softmax as `1 / sum_j exp((x_j - x_i) / t)`, a formulation independent of
/// the library's max-shift implementation.
pub fn softmax_oracle(xs: &[f64], t: f64) -> Vec<f64> {
    xs.iter()
        .map(|xi| 1.0 / xs.iter().map(|xj| ((xj - xi) / t).exp()).sum::<f64>())
        .collect()
}

/// Run-file lines for one query, ranks 1.. in the given order.
pub fn rows(qid: &str, ids: &[String]) -> String {
    ids.iter()
        .enumerate()
        .map(|(i, id)| format!("{qid} Q0 {id} {} {:.3} fixture\n", i + 1, 100.0 - i as f64))
        .collect()
}

/// `gold` at rank `at` behind filler ids.
pub fn with_gold_at(qid: &str, gold: &[(&str, usize)], len: usize) -> String {
    let mut ids: Vec<String> = (0..len).map(|i| format!("{qid}x{i}#0")).collect();
    for &(g, at) in gold {
        ids[at - 1] = g.to_string();
    }
    rows(qid, &ids)
}

/// Ten queries with hand-placed gold ranks:
///
/// | query | golds    | gold ranks | answer        | prediction     |
/// |-------|----------|------------|---------------|----------------|
/// | q1    | a        | 1          | Paris         | paris.         |
/// | q2    | b        | 2          | the Eiffel Tower | Eiffel tower |
/// | q3    | c        | 5          | 1889          | 1890           |
/// | q4    | d        | 6          | Gustave Eiffel | (none)        |
/// | q5    | e        | 10         |               |                |
/// | q6    | f        | 50         |               |                |
/// | q7    | g        | absent     |               |                |
/// | q8    | h1, h2   | 7, 3       |               |                |
/// | q9    | i1, i2   | 1, 20      |               |                |
/// | q10   | j        | no run     |               |                |
pub fn metrics_fixture() -> (RunFile, Qrels, HashMap<String, String>) {
    let run = [
        with_gold_at("q1", &[("a#0", 1)], 3),
        with_gold_at("q2", &[("b#0", 2)], 3),
        with_gold_at("q3", &[("c#0", 5)], 8),
        with_gold_at("q4", &[("d#0", 6)], 8),
        with_gold_at("q5", &[("e#0", 10)], 12),
        with_gold_at("q6", &[("f#0", 50)], 60),
        with_gold_at("q7", &[], 3),
        with_gold_at("q8", &[("h#1", 7), ("h#2", 3)], 10),
        with_gold_at("q9", &[("i#1", 1), ("i#2", 20)], 25),
    ]
    .concat();
    let qrels = "\
q1\twhat is the capital of france\ta#0\tParis
q2\tlandmark\tb#0\tthe Eiffel Tower
q3\tyear built\tc#0\t1889
q4\tarchitect\td#0\tGustave Eiffel
q5\tq\te#0
q6\tq\tf#0
q7\tq\tg#0
q8\tq\th#1
q8\tq\th#2
q9\tq\ti#1
q9\tq\ti#2
q10\tq\tj#0
";
    let answers = "q1\tparis.\nq2\tEiffel tower\nq3\t1890\n";
    (
        RunFile::parse(run.as_bytes()).unwrap(),
        Qrels::parse(qrels.as_bytes()).unwrap(),
        parse_answers(answers.as_bytes()).unwrap(),
    )
}

/// Hand-computed values for [`metrics_fixture`], keyed by report field.
/// First gold ranks are 1 2 5 6 10 50 - 3 1 - for q1..q10.
pub fn metrics_fixture_expected() -> Vec<(&'static str, f64)> {
    vec![
        ("hits@1", 2.0 / 10.0),
        ("hits@5", 5.0 / 10.0),
        ("mrr@5", (1.0 + 1.0 / 2.0 + 1.0 / 5.0 + 1.0 / 3.0 + 1.0) / 10.0),
        ("mrr@10", (1.0 + 1.0 / 2.0 + 1.0 / 5.0 + 1.0 / 6.0 + 1.0 / 10.0 + 1.0 / 3.0 + 1.0) / 10.0),
        (
            "mrr@100",
            (1.0 + 1.0 / 2.0 + 1.0 / 5.0 + 1.0 / 6.0 + 1.0 / 10.0 + 1.0 / 50.0 + 1.0 / 3.0 + 1.0) / 10.0,
        ),
        // q9 finds one of its two golds at rank 1.
        ("recall@1", (1.0 + 0.5) / 10.0),
        // q8 has one of two in the top 5; q9 one of two.
        ("recall@5", (1.0 + 1.0 + 1.0 + 0.5 + 0.5) / 10.0),
        // q1..q5, both of q8's golds, one of q9's.
        ("recall@10", (5.0 + 1.0 + 0.5) / 10.0),
        // Four queries carry gold answers; q1 and q2 match after normalization.
        ("em", 2.0 / 4.0),
    ]
}

pub fn random_run(seed: u64) -> (RunFile, Golds) {
    let mut r = rng(seed);
    let mut run = RunFile::default();
    let mut golds = Golds::new();
    for q in 0..r.random_range(1..15) {
        let qid = format!("q{q}");
        let pool = r.random_range(1..40);
        let mut ids: Vec<String> = (0..pool).map(|i| format!("d{}#{}", i / 3, i % 3)).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, r.random_range(0..=i));
        }
        let n_gold = r.random_range(1..4);
        golds.insert(qid.clone(), (0..n_gold).map(|_| format!("d{}#{}", r.random_range(0..15), r.random_range(0..3))).collect());
        if r.random_bool(0.9) {
            let keep = r.random_range(0..=ids.len());
            let list = ids[..keep].iter().enumerate().map(|(i, id)| (id.clone(), -(i as f64))).collect();
            run.queries.insert(qid, list);
        }
    }
    (run, golds)
}
