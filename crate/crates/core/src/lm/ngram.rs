use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError};
use crate::error::{Error, Result};
use crate::tokenization::{TokenId, Tokenizer, BOS};

pub const DEFAULT_ORDER: usize = 2;
pub const DEFAULT_K: f64 = 0.1;

const FORMAT: &str = "selfret-ngram";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
struct History {
    total: u64,
    counts: HashMap<TokenId, u64>,
}

/// Add-k smoothed n-gram model.
///
/// The next-token distribution comes from the longest history (at most
/// `order - 1` tokens, BOS-padded on the left) that was observed in training,
/// backing off one token at a time down to unigram counts. Every conditional
/// is a full add-k distribution, so each one sums to one and every token keeps
/// nonzero probability.
#[derive(Debug, Clone)]
pub struct NGramLm {
    order: usize,
    k: f64,
    vocab_size: usize,
    /// `tables[h]` holds histories of length `h`.
    tables: Vec<HashMap<Vec<TokenId>, History>>,
}

impl NGramLm {
    pub fn train<S: AsRef<str>>(texts: &[S], tok: &Tokenizer, order: usize, k: f64) -> Result<Self> {
        let seqs: Vec<Vec<TokenId>> = texts.iter().map(|t| tok.encode(t.as_ref())).collect();
        Self::train_tokens(&seqs, tok.vocab_size(), order, k)
    }

    pub fn train_tokens(seqs: &[Vec<TokenId>], vocab_size: usize, order: usize, k: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be >= 1".into()));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("smoothing constant must be > 0, got {k}")));
        }
        let mut tables: Vec<HashMap<Vec<TokenId>, History>> = vec![HashMap::new(); order];
        let pad = order - 1;
        for seq in seqs {
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange { id: bad, vocab_size });
            }
            let mut padded = vec![BOS; pad];
            padded.extend_from_slice(seq);
            for i in pad..padded.len() {
                let target = padded[i];
                for (h, table) in tables.iter_mut().enumerate() {
                    let hist = table.entry(padded[i - h..i].to_vec()).or_default();
                    hist.total += 1;
                    *hist.counts.entry(target).or_default() += 1;
                }
            }
        }
        Ok(NGramLm {
            order,
            k,
            vocab_size,
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    fn history(&self, context: &[TokenId]) -> Result<Option<&History>, LmError> {
        if let Some(&bad) = context.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(LmError::BadContext(bad));
        }
        let pad = self.order - 1;
        let mut window = vec![BOS; pad.saturating_sub(context.len())];
        window.extend_from_slice(&context[context.len().saturating_sub(pad)..]);
        for h in (0..self.order).rev() {
            if let Some(hist) = self.tables[h].get(&window[pad - h..]) {
                return Ok(Some(hist));
            }
        }
        Ok(None)
    }

    fn denominator(&self, hist: Option<&History>) -> f64 {
        hist.map_or(0, |h| h.total) as f64 + self.k * self.vocab_size as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, &self.to_file())?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let f: ModelFile = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_file(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(json)?)
    }

    fn to_file(&self) -> ModelFile {
        let tables = self
            .tables
            .iter()
            .map(|table| {
                let mut rows: Vec<HistoryRow> = table
                    .iter()
                    .map(|(history, h)| {
                        let mut counts: Vec<(TokenId, u64)> =
                            h.counts.iter().map(|(&t, &c)| (t, c)).collect();
                        counts.sort_unstable();
                        HistoryRow {
                            history: history.clone(),
                            counts,
                        }
                    })
                    .collect();
                rows.sort_unstable_by(|a, b| a.history.cmp(&b.history));
                rows
            })
            .collect();
        ModelFile {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            order: self.order,
            k: self.k,
            vocab_size: self.vocab_size,
            tables,
        }
    }

    fn from_file(f: ModelFile) -> Result<Self> {
        if f.format != FORMAT || f.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model file {} v{}",
                f.format, f.version
            )));
        }
        if f.order == 0 || f.tables.len() != f.order || !(f.k > 0.0) {
            return Err(Error::Config("inconsistent n-gram model file".into()));
        }
        let mut tables = Vec::with_capacity(f.order);
        for (h, rows) in f.tables.into_iter().enumerate() {
            let mut table = HashMap::with_capacity(rows.len());
            for row in rows {
                if row.history.len() != h {
                    return Err(Error::Config("history length mismatch in model file".into()));
                }
                let mut hist = History::default();
                for (t, c) in row.counts {
                    if t as usize >= f.vocab_size {
                        return Err(Error::TokenOutOfRange {
                            id: t,
                            vocab_size: f.vocab_size,
                        });
                    }
                    hist.total += c;
                    hist.counts.insert(t, c);
                }
                table.insert(row.history, hist);
            }
            tables.push(table);
        }
        Ok(NGramLm {
            order: f.order,
            k: f.k,
            vocab_size: f.vocab_size,
            tables,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HistoryRow {
    history: Vec<TokenId>,
    counts: Vec<(TokenId, u64)>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    order: usize,
    k: f64,
    vocab_size: usize,
    tables: Vec<Vec<HistoryRow>>,
}

impl LanguageModel for NGramLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let hist = self.history(context)?;
        let denom = self.denominator(hist);
        let mut out = vec![(self.k / denom).ln(); self.vocab_size];
        if let Some(h) = hist {
            for (&t, &c) in &h.counts {
                out[t as usize] = ((c as f64 + self.k) / denom).ln();
            }
        }
        Ok(out)
    }

    fn token_logprobs(&self, context: &[TokenId], tokens: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let hist = self.history(context)?;
        let denom = self.denominator(hist);
        tokens
            .iter()
            .map(|&t| {
                if t as usize >= self.vocab_size {
                    return Err(LmError::Shape(format!("token {t} outside vocabulary")));
                }
                let c = hist.and_then(|h| h.counts.get(&t)).copied().unwrap_or(0);
                Ok(((c as f64 + self.k) / denom).ln())
            })
            .collect()
    }

    fn descriptor(&self) -> String {
        format!("ngram(order={}, k={}, vocab={})", self.order, self.k, self.vocab_size)
    }
}
