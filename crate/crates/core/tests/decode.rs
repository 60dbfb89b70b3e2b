mod common;

use common::*;
use proptest::prelude::*;
use selfret::config::{Config, DecodeConfig};
use selfret::corpus::CorpusStore;
use selfret::decode::{constrained_beam_search, generate_passages, generate_titles, retrieve, Candidate};
use selfret::index::TrieIndex;
use selfret::lm::{sequence_logprob, Constraint, LanguageModel, LmError, NGramLm, UniformLm};
use selfret::prompt::PromptTemplates;
use selfret::tokenization::{TokenId, Tokenizer, EOS};
use selfret::trie::TokenTrie;
use selfret::Error;

fn indexed(store: &CorpusStore) -> TrieIndex {
    let cfg = Config::default();
    let texts = cfg.vocab_texts();
    let extra: Vec<&str> = texts.iter().map(String::as_str).collect();
    let tok = Tokenizer::build(store, &extra);
    TrieIndex::build(store, &tok).unwrap()
}

fn as_triples(c: &[Candidate]) -> Vec<(String, Vec<TokenId>, f64)> {
    c.iter()
        .map(|c| (c.leaf_id.clone(), c.tokens.clone(), c.logprob))
        .collect()
}

const VOCAB: usize = 16;

fn check_exhaustive(seed: u64, lm: &dyn LanguageModel, prompt: &[TokenId]) -> Result<(), String> {
    let seqs = random_sequences(seed, 50, 6, 7);
    let trie = TokenTrie::build(seqs.clone()).unwrap();
    let want = oracle_ranking(lm, prompt, &seqs);
    for early in [false, true] {
        let got = constrained_beam_search(lm, &trie, prompt, seqs.len(), 64, early).unwrap();
        matches_oracle(&as_triples(&got), &want, 1e-12)?;
        for c in &got {
            if trie.lookup(&c.tokens) != Some(c.leaf_id.as_str()) {
                return Err(format!("{} does not look up", c.leaf_id));
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn exhaustive_beam_matches_oracle_hash_lm(seed in any::<u64>(), salt in any::<u64>()) {
        let lm = HashLm { vocab: VOCAB, salt };
        check_exhaustive(seed, &lm, &[1, 4]).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn exhaustive_beam_matches_oracle_uniform(seed in any::<u64>()) {
        check_exhaustive(seed, &UniformLm::new(VOCAB), &[]).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn early_termination_is_exact_for_every_beam(seed in any::<u64>(), salt in any::<u64>(), beam in 1usize..60) {
        let lm = HashLm { vocab: VOCAB, salt };
        let seqs = random_sequences(seed, 50, 6, 7);
        let trie = TokenTrie::build(seqs).unwrap();
        let off = constrained_beam_search(&lm, &trie, &[1], beam, 64, false).unwrap();
        let on = constrained_beam_search(&lm, &trie, &[1], beam, 64, true).unwrap();
        prop_assert_eq!(off.len(), on.len());
        for (a, b) in off.iter().zip(&on) {
            prop_assert_eq!(&a.tokens, &b.tokens);
            prop_assert_eq!(&a.leaf_id, &b.leaf_id);
            prop_assert!((a.logprob - b.logprob).abs() <= 1e-12);
            prop_assert!(!a.terminated_early);
        }
    }

    /// A narrow beam can only do worse than exhaustive search, rank by rank.
    #[test]
    fn narrow_beam_is_dominated_by_exhaustive(seed in any::<u64>(), salt in any::<u64>(), beam in 1usize..20) {
        let lm = HashLm { vocab: VOCAB, salt };
        let seqs = random_sequences(seed, 50, 6, 7);
        let trie = TokenTrie::build(seqs.clone()).unwrap();
        let narrow = constrained_beam_search(&lm, &trie, &[], beam, 64, true).unwrap();
        let full = constrained_beam_search(&lm, &trie, &[], seqs.len(), 64, true).unwrap();
        prop_assert!(narrow.len() <= beam);
        prop_assert_eq!(narrow.len(), beam.min(seqs.len()));
        for (n, f) in narrow.iter().zip(&full) {
            prop_assert!(n.logprob <= f.logprob + 1e-12);
        }
        // Results are sorted.
        for w in narrow.windows(2) {
            prop_assert!(w[0].logprob >= w[1].logprob);
        }
    }

    /// Constrained scores of all stored sequences form a distribution.
    #[test]
    fn constrained_scores_sum_to_one(seed in any::<u64>(), salt in any::<u64>()) {
        let lm = HashLm { vocab: VOCAB, salt };
        let seqs = random_sequences(seed, 50, 6, 7);
        let trie = TokenTrie::build(seqs.clone()).unwrap();
        let total: f64 = seqs
            .iter()
            .map(|(_, s)| {
                let mut full = s.clone();
                full.push(EOS);
                let c = Constraint { trie: &trie, anchor: &[] };
                sequence_logprob(&lm, &[3], &full, Some(c)).unwrap().exp()
            })
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "total {}", total);
    }
}

/// Model with fixed first-step preferences, uniform afterwards.
struct Skewed;

impl LanguageModel for Skewed {
    fn vocab_size(&self) -> usize {
        10
    }
    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let mut p = vec![0.0; 10];
        if context.is_empty() {
            p[5] = 0.4;
            p[7] = 0.6;
        } else {
            p.iter_mut().for_each(|x| *x = 0.1);
        }
        Ok(p.into_iter().map(f64::ln).collect())
    }
    fn descriptor(&self) -> String {
        "skewed".into()
    }
}

/// Widening the beam can push out a candidate that a narrower beam ranked
/// first: beam 1 commits to the likelier first token (0.6) whose children
/// split it to 0.3 each, while beam 2 also keeps the 0.4 branch.
#[test]
fn wider_beam_can_replace_the_top_candidate() {
    let trie = TokenTrie::build(vec![
        ("a".to_string(), vec![5, 6]),
        ("b".to_string(), vec![7, 8]),
        ("c".to_string(), vec![7, 9]),
    ])
    .unwrap();
    let b1 = constrained_beam_search(&Skewed, &trie, &[], 1, 8, true).unwrap();
    let b2 = constrained_beam_search(&Skewed, &trie, &[], 2, 8, true).unwrap();
    assert_eq!(b1[0].leaf_id, "b");
    assert_eq!(b2[0].leaf_id, "a");
    assert!(b2.iter().all(|c| c.leaf_id != "c"));
}

#[test]
fn f1_title_and_passage_examples() {
    let store = f1_store(200);
    let index = indexed(&store);
    let prompts = PromptTemplates::default();
    let uniform = UniformLm::new(index.tokenizer().vocab_size());

    let cfg = DecodeConfig {
        title_beam: 3,
        passage_beam: 2,
        ..Default::default()
    };
    let titles = generate_titles(&uniform, &index, &prompts, "anything", &cfg).unwrap();
    let ids: Vec<&str> = titles.iter().map(|c| c.leaf_id.as_str()).collect();
    assert_eq!(ids, ["d3", "d1", "d2"]);
    assert!((titles[0].logprob + 2f64.ln()).abs() < 1e-12);
    assert!((titles[1].logprob + 4f64.ln()).abs() < 1e-12);

    // i larger than the number of titles is clamped.
    let wide = DecodeConfig {
        title_beam: 50,
        ..Default::default()
    };
    assert_eq!(generate_titles(&uniform, &index, &prompts, "q", &wide).unwrap().len(), 3);

    // One passage per document at max_words 200: forced, score 0.
    let got = retrieve(&uniform, &index, &prompts, "q", &cfg).unwrap();
    assert_eq!(got.len(), 3);
    assert!(got.iter().all(|c| c.passage.logprob == 0.0));
}

#[test]
fn f1_split_retrieve_yields_four() {
    // max_words 4 puts each of d1's sentences in its own passage.
    let store = f1_store(4);
    assert_eq!(store.passages().len(), 4);
    let index = indexed(&store);
    let prompts = PromptTemplates::default();
    let uniform = UniformLm::new(index.tokenizer().vocab_size());
    let cfg = DecodeConfig {
        title_beam: 3,
        passage_beam: 2,
        ..Default::default()
    };
    let got = retrieve(&uniform, &index, &prompts, "q", &cfg).unwrap();
    assert_eq!(got.len(), 4);
    let d1: Vec<&Candidate> = got
        .iter()
        .filter(|c| c.title.leaf_id == "d1")
        .map(|c| &c.passage)
        .collect();
    assert_eq!(d1.len(), 2);
    // Shared prefix "apple pie" is forced; the branch is a fair coin.
    for p in &d1 {
        assert!((p.logprob + 2f64.ln()).abs() < 1e-12);
    }

    let title = &generate_titles(&uniform, &index, &prompts, "q", &cfg).unwrap()[1];
    assert_eq!(title.leaf_id, "d1");
    let wide = DecodeConfig {
        passage_beam: 10,
        ..cfg
    };
    assert_eq!(generate_passages(&uniform, &index, &prompts, "q", title, &wide).unwrap().len(), 2);
}

#[test]
fn passage_beam_clamps_to_document_size() {
    let text = "w1 one. w2 two. w3 three. w4 four.";
    let store = CorpusStore::from_documents(vec![doc("d", "only", text)], 2).unwrap();
    assert_eq!(store.passages().len(), 4);
    let index = indexed(&store);
    let lm = UniformLm::new(index.tokenizer().vocab_size());
    let prompts = PromptTemplates::default();
    let cfg = DecodeConfig::default();
    let titles = generate_titles(&lm, &index, &prompts, "q", &cfg).unwrap();
    assert_eq!(titles.len(), 1);
    assert_eq!(titles[0].logprob, 0.0);
    let passages = generate_passages(&lm, &index, &prompts, "q", &titles[0], &cfg).unwrap();
    assert_eq!(passages.len(), 4);
}

#[test]
fn bigram_prefers_apple_pie_for_recipe_query() {
    let store = f1_store(200);
    let index = indexed(&store);
    let lm = NGramLm::train(&store.texts(), index.tokenizer(), 2, 0.1).unwrap();
    let prompts = PromptTemplates::default();
    let cfg = DecodeConfig::default();
    let titles = generate_titles(&lm, &index, &prompts, "apple pie recipe", &cfg).unwrap();
    assert_eq!(titles[0].leaf_id, "d1");

    // Exhaustive oracle agrees on the full ordering.
    let prompt = selfret::decode::retrieval_prompt(&index, &prompts, "apple pie recipe");
    let seqs: Vec<(String, Vec<TokenId>)> = index
        .title_trie()
        .entries()
        .map(|(id, s)| (id.to_string(), s.to_vec()))
        .collect();
    matches_oracle(&as_triples(&titles), &oracle_ranking(&lm, &prompt, &seqs), 1e-12).unwrap();
}

#[test]
fn every_candidate_is_a_corpus_passage() {
    let docs = synthetic_docs(7, 150, 12, 25, 300);
    let store = CorpusStore::from_documents(docs, 60).unwrap();
    let index = indexed(&store);
    let tok = index.tokenizer();
    let lm = NGramLm::train(&store.texts(), tok, 2, 0.1).unwrap();
    let prompts = PromptTemplates::default();
    let cfg = DecodeConfig::default();
    for q in synthetic_queries(8, 40, 300) {
        let got = retrieve(&lm, &index, &prompts, &q, &cfg).unwrap();
        assert!(!got.is_empty() && got.len() <= 50);
        for c in got {
            let p = store.passage(&c.passage.leaf_id).unwrap();
            assert_eq!(tok.decode(&c.passage.tokens).unwrap(), p.text);
            assert_eq!(p.doc_id, c.title.leaf_id);
            assert_eq!(tok.decode(&c.title.tokens).unwrap(), store.document(&p.doc_id).unwrap().title);
        }
    }
}

#[test]
fn vocab_mismatch_is_rejected() {
    let store = f1_store(200);
    let index = indexed(&store);
    let lm = UniformLm::new(index.tokenizer().vocab_size() + 1);
    let err = generate_titles(&lm, &index, &PromptTemplates::default(), "q", &DecodeConfig::default());
    assert!(matches!(err, Err(Error::VocabMismatch { .. })));
}

#[test]
fn unknown_document_is_an_error() {
    let store = f1_store(200);
    let index = indexed(&store);
    let lm = UniformLm::new(index.tokenizer().vocab_size());
    let ghost = Candidate {
        tokens: vec![5],
        logprob: 0.0,
        leaf_id: "nope".into(),
        terminated_early: false,
    };
    let err = generate_passages(&lm, &index, &PromptTemplates::default(), "q", &ghost, &DecodeConfig::default());
    assert!(matches!(err, Err(Error::UnknownDocument(_))));
}
