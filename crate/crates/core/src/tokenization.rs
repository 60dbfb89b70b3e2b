//! Word-level reference tokenizer shared by the trie, the language models and
//! the decoder.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// Section separator inside prompts and training targets.
pub const SEP: TokenId = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Literal form of [`SEP`] as it appears in templates and training text.
pub const SEP_LITERAL: &str = SPECIAL_TOKENS[SEP as usize];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Tokenizer {
    fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Vocab(format!("token {i} is empty or has whitespace")));
            }
            if ids.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Vocab(format!("id {i} must be {special}")));
            }
        }
        Ok(Tokenizer { vocab, ids })
    }

    /// Builds a vocabulary covering every title and passage word of the store
    /// plus every word of `extra_texts`. Words are ordered by frequency
    /// (descending), ties broken lexicographically, after the specials.
    pub fn build(store: &CorpusStore, extra_texts: &[&str]) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let texts = store
            .documents()
            .iter()
            .map(|d| d.title.as_str())
            .chain(store.passages().iter().map(|p| p.text.as_str()))
            .chain(extra_texts.iter().copied());
        for text in texts {
            for word in text.split_whitespace() {
                *counts.entry(word).or_default() += 1;
            }
        }
        for special in SPECIAL_TOKENS {
            counts.remove(special);
        }
        let mut words: Vec<(&str, u64)> = counts.into_iter().collect();
        words.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let vocab = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_vocab(vocab).expect("built vocabulary is well formed")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// The word-level tokenizer round-trips all in-vocabulary text.
    pub fn is_reversible(&self) -> bool {
        true
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.ids.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab.len(),
            })?;
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    pub fn write_vocab(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, tok) in self.vocab.iter().enumerate() {
            writeln!(w, "{tok}\t{i}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_vocab(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a `token \t id` vocabulary; ids must be dense and the specials
    /// must occupy ids 0..=4.
    pub fn read_vocab(source: impl BufRead) -> Result<Self> {
        let mut entries: Vec<Option<String>> = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected token<TAB>id".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad id {id:?}"),
            })?;
            if id >= entries.len() {
                entries.resize(id + 1, None);
            }
            if entries[id].replace(tok.to_string()).is_some() {
                return Err(Error::Vocab(format!("id {id} assigned twice")));
            }
        }
        let vocab = entries
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::Vocab(format!("id {i} missing"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_vocab(vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_vocab(std::io::BufReader::new(file))
    }

    pub(crate) fn tokens(&self) -> &[String] {
        &self.vocab
    }

    pub(crate) fn from_tokens(vocab: Vec<String>) -> Result<Self> {
        Self::from_vocab(vocab)
    }
}
