//! Rank metrics over TREC-style run files, answer exact match, and a latency
//! benchmark for the retrieval pipeline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::DecodeConfig;
use crate::decode::retrieve;
use crate::error::{Error, Result};
use crate::index::{IndexStats, TrieIndex};
use crate::lm::LanguageModel;
use crate::prompt::PromptTemplates;
use crate::qrels::Qrels;

/// Ranked ids per query, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    pub queries: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunFile {
    /// Parses `query_id Q0 id rank score tag` lines. Ranks must run 1..n per
    /// query with no repeated id.
    pub fn parse(source: impl BufRead) -> Result<Self> {
        let mut rows: BTreeMap<String, Vec<(usize, String, f64, usize)>> = BTreeMap::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (i, line) in source.lines().enumerate() {
            let lineno = i + 1;
            let bad = |message: String| Error::Parse { line: lineno, message };
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", f.len())));
            }
            let rank: usize = f[3].parse().map_err(|_| bad(format!("bad rank {:?}", f[3])))?;
            let score: f64 = f[4].parse().map_err(|_| bad(format!("bad score {:?}", f[4])))?;
            if !seen.insert((f[0].to_string(), f[2].to_string())) {
                return Err(bad(format!("duplicate id {:?} for query {:?}", f[2], f[0])));
            }
            rows.entry(f[0].to_string())
                .or_default()
                .push((rank, f[2].to_string(), score, lineno));
        }
        let mut queries = BTreeMap::new();
        for (qid, mut list) in rows {
            list.sort_by_key(|r| r.0);
            for (expect, r) in list.iter().enumerate() {
                if r.0 != expect + 1 {
                    return Err(Error::Parse {
                        line: r.3,
                        message: format!("ranks for query {qid:?} are not dense from 1"),
                    });
                }
            }
            queries.insert(qid, list.into_iter().map(|(_, id, s, _)| (id, s)).collect());
        }
        Ok(RunFile { queries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(file))
    }

    /// Replaces passage ids with their document ids (`doc#n` to `doc`),
    /// keeping each document's best rank.
    pub fn to_document_level(&self) -> RunFile {
        let queries = self
            .queries
            .iter()
            .map(|(q, list)| {
                let mut seen = HashSet::new();
                let docs = list
                    .iter()
                    .map(|(id, s)| (doc_of(id).to_string(), *s))
                    .filter(|(d, _)| seen.insert(d.clone()))
                    .collect();
                (q.clone(), docs)
            })
            .collect();
        RunFile { queries }
    }
}

/// Document id of a passage id.
pub fn doc_of(passage_id: &str) -> &str {
    passage_id.rsplit_once('#').map_or(passage_id, |(d, _)| d)
}

/// Gold ids per query.
pub type Golds = BTreeMap<String, Vec<String>>;

pub fn golds_from_qrels(qrels: &Qrels) -> Golds {
    qrels.golds().into_iter().collect()
}

pub fn project_golds_to_documents(golds: &Golds) -> Golds {
    golds
        .iter()
        .map(|(q, ids)| {
            let mut out: Vec<String> = Vec::new();
            for id in ids {
                let d = doc_of(id);
                if !out.iter().any(|x| x == d) {
                    out.push(d.to_string());
                }
            }
            (q.clone(), out)
        })
        .collect()
}

fn ranked<'a>(run: &'a RunFile, qid: &str) -> &'a [(String, f64)] {
    run.queries.get(qid).map_or(&[], Vec::as_slice)
}

fn first_gold_rank(list: &[(String, f64)], golds: &[String]) -> Option<usize> {
    list.iter().position(|(id, _)| golds.contains(id)).map(|i| i + 1)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of queries with a gold id at rank `<= k`. Queries absent from
/// the run count as misses.
pub fn hits_at_k(run: &RunFile, golds: &Golds, k: usize) -> f64 {
    mean(golds.iter().map(|(q, g)| {
        f64::from(first_gold_rank(ranked(run, q), g).is_some_and(|r| r <= k))
    }))
}

pub fn mrr_at_k(run: &RunFile, golds: &Golds, k: usize) -> f64 {
    mean(golds.iter().map(|(q, g)| match first_gold_rank(ranked(run, q), g) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }))
}

/// Mean over queries of the fraction of that query's golds in the top `k`.
pub fn recall_at_k(run: &RunFile, golds: &Golds, k: usize) -> f64 {
    mean(golds.iter().map(|(q, g)| query_recall(ranked(run, q), g, k)))
}

fn query_recall(list: &[(String, f64)], golds: &[String], k: usize) -> f64 {
    if golds.is_empty() {
        return 0.0;
    }
    let top: HashSet<&str> = list.iter().take(k).map(|(id, _)| id.as_str()).collect();
    golds.iter().filter(|g| top.contains(g.as_str())).count() as f64 / golds.len() as f64
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let stripped: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn answer_matches(prediction: &str, golds: &[String]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g) == p)
}

/// Fraction of predictions matching any of their gold answers.
pub fn exact_match(predictions: &[String], golds: &[Vec<String>]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch(predictions.len(), golds.len()));
    }
    Ok(mean(
        predictions
            .iter()
            .zip(golds)
            .map(|(p, g)| f64::from(answer_matches(p, g))),
    ))
}

/// Parses `query_id \t answer` lines.
pub fn parse_answers(source: impl BufRead) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let (q, a) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected query_id<TAB>answer".into(),
        })?;
        out.insert(q.to_string(), a.to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Passage,
    Document,
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passage" => Ok(Level::Passage),
            "document" => Ok(Level::Document),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub first_gold_rank: Option<usize>,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub num_queries: usize,
    #[serde(rename = "hits@1")]
    pub hits_1: f64,
    #[serde(rename = "hits@5")]
    pub hits_5: f64,
    #[serde(rename = "mrr@5")]
    pub mrr_5: f64,
    #[serde(rename = "mrr@10")]
    pub mrr_10: f64,
    #[serde(rename = "mrr@100")]
    pub mrr_100: f64,
    #[serde(rename = "recall@1")]
    pub recall_1: f64,
    #[serde(rename = "recall@5")]
    pub recall_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    /// Present when predictions were supplied.
    pub em: Option<f64>,
    pub per_query: Vec<QueryMetrics>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn table(&self) -> String {
        let mut rows = vec![
            ("hits@1", self.hits_1),
            ("hits@5", self.hits_5),
            ("mrr@5", self.mrr_5),
            ("mrr@10", self.mrr_10),
            ("mrr@100", self.mrr_100),
            ("recall@1", self.recall_1),
            ("recall@5", self.recall_5),
            ("recall@10", self.recall_10),
        ];
        if let Some(em) = self.em {
            rows.push(("em", em));
        }
        let mut out = format!(
            "level      {}\nqueries    {}\n",
            match self.level {
                Level::Passage => "passage",
                Level::Document => "document",
            },
            self.num_queries
        );
        for (name, v) in rows {
            out.push_str(&format!("{name:<10} {v:.4}\n"));
        }
        out
    }
}

/// Full report. At document level both the run and the golds are projected
/// from passage ids to document ids first. `answers` holds predicted
/// answers per query for EM.
pub fn evaluate(
    run: &RunFile,
    qrels: &Qrels,
    level: Level,
    answers: Option<&HashMap<String, String>>,
) -> MetricsReport {
    let passage_golds = golds_from_qrels(qrels);
    let (run, golds) = match level {
        Level::Passage => (run.clone(), passage_golds),
        Level::Document => (run.to_document_level(), project_golds_to_documents(&passage_golds)),
    };
    let gold_answers = qrels.answers();
    let mut warnings = Vec::new();
    let mut per_query = Vec::with_capacity(golds.len());
    for (q, g) in &golds {
        let list = ranked(&run, q);
        if !run.queries.contains_key(q) {
            warnings.push(format!("query {q} missing from run, scored as a miss"));
        }
        let exact_match = answers.and_then(|preds| {
            let gold = gold_answers.get(q)?;
            Some(preds.get(q).is_some_and(|p| answer_matches(p, gold)))
        });
        per_query.push(QueryMetrics {
            query_id: q.clone(),
            first_gold_rank: first_gold_rank(list, g),
            recall_at_1: query_recall(list, g, 1),
            recall_at_5: query_recall(list, g, 5),
            recall_at_10: query_recall(list, g, 10),
            exact_match,
        });
    }
    let em_values: Vec<f64> = per_query
        .iter()
        .filter_map(|m| m.exact_match.map(f64::from))
        .collect();
    MetricsReport {
        level,
        num_queries: golds.len(),
        hits_1: hits_at_k(&run, &golds, 1),
        hits_5: hits_at_k(&run, &golds, 5),
        mrr_5: mrr_at_k(&run, &golds, 5),
        mrr_10: mrr_at_k(&run, &golds, 10),
        mrr_100: mrr_at_k(&run, &golds, 100),
        recall_1: recall_at_k(&run, &golds, 1),
        recall_5: recall_at_k(&run, &golds, 5),
        recall_10: recall_at_k(&run, &golds, 10),
        em: (answers.is_some() && !em_values.is_empty()).then(|| mean(em_values.into_iter())),
        per_query,
        warnings,
    }
}

pub fn evaluate_run(
    run_path: impl AsRef<Path>,
    qrels_path: impl AsRef<Path>,
    level: Level,
) -> Result<MetricsReport> {
    Ok(evaluate(
        &RunFile::load(run_path)?,
        &Qrels::load(qrels_path)?,
        level,
        None,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub beam: usize,
    pub queries: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub mean_candidates: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub lm: String,
    pub index: IndexStats,
    pub entries: Vec<BenchEntry>,
}

/// Retrieval latency per query for each beam size, applied to both the
/// title and the passage beam. With `threads > 1` queries are spread over
/// that many workers; latency is still measured per query.
pub fn benchmark(
    index: &TrieIndex,
    lm: &dyn LanguageModel,
    prompts: &PromptTemplates,
    base: &DecodeConfig,
    queries: &[String],
    beam_sizes: &[usize],
    threads: usize,
) -> Result<BenchReport> {
    let mut entries = Vec::new();
    if !queries.is_empty() {
        let threads = threads.clamp(1, queries.len());
        for &beam in beam_sizes {
            let cfg = DecodeConfig {
                title_beam: beam,
                passage_beam: beam,
                ..base.clone()
            };
            let time_one = |q: &String| -> Result<(f64, usize)> {
                let t = Instant::now();
                let n = retrieve(lm, index, prompts, q, &cfg)?.len();
                Ok((t.elapsed().as_secs_f64() * 1e3, n))
            };
            let samples: Vec<(f64, usize)> = if threads == 1 {
                queries.iter().map(time_one).collect::<Result<_>>()?
            } else {
                std::thread::scope(|scope| {
                    let workers: Vec<_> = (0..threads)
                        .map(|w| {
                            let time_one = &time_one;
                            scope.spawn(move || {
                                queries
                                    .iter()
                                    .skip(w)
                                    .step_by(threads)
                                    .map(time_one)
                                    .collect::<Result<Vec<_>>>()
                            })
                        })
                        .collect();
                    let mut all = Vec::with_capacity(queries.len());
                    for w in workers {
                        all.extend(w.join().expect("benchmark worker panicked")?);
                    }
                    Ok::<_, Error>(all)
                })?
            };
            let mut times: Vec<f64> = samples.iter().map(|s| s.0).collect();
            let candidates: usize = samples.iter().map(|s| s.1).sum();
            let mean_ms = mean(times.iter().copied());
            times.sort_by(f64::total_cmp);
            let mid = times.len() / 2;
            let median_ms = if times.len() % 2 == 1 {
                times[mid]
            } else {
                (times[mid - 1] + times[mid]) / 2.0
            };
            entries.push(BenchEntry {
                beam,
                queries: queries.len(),
                mean_ms,
                median_ms,
                mean_candidates: candidates as f64 / queries.len() as f64,
            });
        }
    }
    Ok(BenchReport {
        lm: lm.descriptor(),
        index: index.stats(),
        entries,
    })
}
