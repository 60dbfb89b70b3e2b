//! Query relevance labels: `query_id \t query_text \t gold_passage_id [\t answer]`.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QrelRow {
    pub query_id: String,
    pub query: String,
    pub gold_passage_id: String,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Qrels {
    rows: Vec<QrelRow>,
}

impl Qrels {
    pub fn new(rows: Vec<QrelRow>) -> Self {
        Qrels { rows }
    }

    pub fn parse(source: impl BufRead) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected 3 or 4 tab-separated fields, got {}", fields.len()),
                });
            }
            if fields[0].is_empty() || fields[2].is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty query_id or gold_passage_id".into(),
                });
            }
            rows.push(QrelRow {
                query_id: fields[0].to_string(),
                query: fields[1].to_string(),
                gold_passage_id: fields[2].to_string(),
                answer: fields.get(3).map(|a| a.to_string()),
            });
        }
        Ok(Qrels { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::io::BufReader::new(file))
    }

    pub fn rows(&self) -> &[QrelRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct `(query_id, query_text)` pairs in first-seen order.
    pub fn queries(&self) -> Vec<(String, String)> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for row in &self.rows {
            if seen.insert(row.query_id.as_str(), ()).is_none() {
                out.push((row.query_id.clone(), row.query.clone()));
            }
        }
        out
    }

    /// Gold passage ids per query, in file order without duplicates.
    pub fn golds(&self) -> HashMap<String, Vec<String>> {
        let mut out: HashMap<String, Vec<String>> = HashMap::new();
        for row in &self.rows {
            let golds = out.entry(row.query_id.clone()).or_default();
            if !golds.contains(&row.gold_passage_id) {
                golds.push(row.gold_passage_id.clone());
            }
        }
        out
    }

    /// Non-empty gold answers per query.
    pub fn answers(&self) -> HashMap<String, Vec<String>> {
        let mut out: HashMap<String, Vec<String>> = HashMap::new();
        for row in &self.rows {
            if let Some(answer) = row.answer.as_deref().filter(|a| !a.trim().is_empty()) {
                let answers = out.entry(row.query_id.clone()).or_default();
                if !answers.iter().any(|a| a == answer) {
                    answers.push(answer.to_string());
                }
            }
        }
        out
    }
}
