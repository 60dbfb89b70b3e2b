//! Corpus ingestion: documents, sentence splitting and passage chunking.
//!
//! Text is whitespace-normalized before anything else happens, so a document's
//! passages joined by single spaces always reproduce its normalized text.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default passage size in words.
pub const DEFAULT_MAX_WORDS: usize = 200;

/// Words that end in a period without ending a sentence.
const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "jr.", "sr.", "etc.", "e.g.", "i.e.", "vs.",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '}', '\u{201d}', '\u{2019}'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '{', '\u{201c}', '\u{2018}'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub word_count: usize,
    pub ordinal: usize,
    /// Set when the passage holds a fragment of a sentence longer than the
    /// word budget.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub hard_split: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    /// Byte span into the text the sentence was split from.
    pub char_span: (usize, usize),
}

impl Sentence {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

pub fn passage_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal}")
}

/// Collapses every whitespace run to a single space and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn is_sentence_end(word: &str) -> bool {
    let core = word.trim_end_matches(CLOSERS);
    if !core.ends_with(['.', '!', '?']) {
        return false;
    }
    let bare = core.trim_start_matches(OPENERS).to_lowercase();
    !ABBREVIATIONS.contains(&bare.as_str())
}

/// Splits text into sentences at words ending in `.`, `!` or `?` (closing
/// quotes and brackets allowed after the terminator), except for the fixed
/// abbreviation list. Text without a terminator is one sentence.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let mut sentences = Vec::new();
    let mut start: Option<usize> = None;
    let mut words: Vec<&str> = Vec::new();

    let mut flush = |start: usize, end: usize, words: &mut Vec<&str>| {
        sentences.push(Sentence {
            text: words.join(" "),
            char_span: (start, end),
        });
        words.clear();
    };

    for (offset, word) in word_spans(text) {
        let begin = *start.get_or_insert(offset);
        words.push(word);
        if is_sentence_end(word) {
            flush(begin, offset + word.len(), &mut words);
            start = None;
        }
    }
    if let Some(begin) = start {
        let end = text.trim_end().len();
        flush(begin, end, &mut words);
    }
    sentences
}

fn word_spans(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut rest = 0usize;
    std::iter::from_fn(move || {
        let tail = &text[rest..];
        let lead = tail.len() - tail.trim_start().len();
        let begin = rest + lead;
        if begin >= text.len() {
            return None;
        }
        let word_len = text[begin..]
            .find(char::is_whitespace)
            .unwrap_or(text.len() - begin);
        rest = begin + word_len;
        Some((begin, &text[begin..begin + word_len]))
    })
}

/// Greedy sentence packing: whole sentences are added while the passage stays
/// within `max_words`. A sentence longer than `max_words` is hard-split into
/// `max_words`-sized pieces, each its own passage.
pub fn chunk_document(doc: &Document, max_words: usize) -> Result<Vec<Passage>> {
    if max_words == 0 {
        return Err(Error::Config("max_words must be >= 1".into()));
    }
    let text = normalize_whitespace(&doc.text);
    let mut passages = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut current_words = 0usize;

    let push = |passages: &mut Vec<Passage>, text: String, words: usize, hard_split: bool| {
        let ordinal = passages.len();
        passages.push(Passage {
            passage_id: passage_id(&doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            text,
            word_count: words,
            ordinal,
            hard_split,
        });
    };

    for sentence in split_sentences(&text) {
        let words = sentence.word_count();
        if current_words + words <= max_words {
            current.push(sentence.text);
            current_words += words;
            continue;
        }
        if !current.is_empty() {
            push(&mut passages, current.join(" "), current_words, false);
            current.clear();
            current_words = 0;
        }
        if words <= max_words {
            current.push(sentence.text);
            current_words = words;
        } else {
            let pieces: Vec<&str> = sentence.text.split(' ').collect();
            for piece in pieces.chunks(max_words) {
                push(&mut passages, piece.join(" "), piece.len(), true);
            }
        }
    }
    if !current.is_empty() {
        push(&mut passages, current.join(" "), current_words, false);
    }
    Ok(passages)
}

#[derive(Debug, Deserialize)]
struct CorpusRecord {
    doc_id: String,
    title: String,
    text: String,
}

/// An immutable, chunked corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "StoreFile", into = "StoreFile")]
pub struct CorpusStore {
    max_words: usize,
    documents: Vec<Document>,
    passages: Vec<Passage>,
    doc_passages: Vec<Range<usize>>,
    doc_index: HashMap<String, usize>,
    passage_index: HashMap<String, usize>,
    title_index: HashMap<String, String>,
    rejected: usize,
    title_collisions: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    max_words: usize,
    rejected: usize,
    title_collisions: usize,
    documents: Vec<Document>,
    passages: Vec<Passage>,
}

impl From<StoreFile> for CorpusStore {
    fn from(f: StoreFile) -> Self {
        CorpusStore::assemble(
            f.max_words,
            f.documents,
            f.passages,
            f.rejected,
            f.title_collisions,
        )
    }
}

impl From<CorpusStore> for StoreFile {
    fn from(s: CorpusStore) -> Self {
        StoreFile {
            max_words: s.max_words,
            rejected: s.rejected,
            title_collisions: s.title_collisions,
            documents: s.documents,
            passages: s.passages,
        }
    }
}

impl CorpusStore {
    fn assemble(
        max_words: usize,
        documents: Vec<Document>,
        passages: Vec<Passage>,
        rejected: usize,
        title_collisions: usize,
    ) -> Self {
        let doc_index: HashMap<String, usize> = documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i))
            .collect();
        let passage_index = passages
            .iter()
            .enumerate()
            .map(|(i, p)| (p.passage_id.clone(), i))
            .collect();
        let title_index = documents
            .iter()
            .map(|d| (d.title.clone(), d.doc_id.clone()))
            .collect();
        let mut doc_passages = vec![0..0; documents.len()];
        let mut i = 0;
        while i < passages.len() {
            let doc = doc_index[&passages[i].doc_id];
            let start = i;
            while i < passages.len() && passages[i].doc_id == passages[start].doc_id {
                i += 1;
            }
            doc_passages[doc] = start..i;
        }
        CorpusStore {
            max_words,
            documents,
            passages,
            doc_passages,
            doc_index,
            passage_index,
            title_index,
            rejected,
            title_collisions,
        }
    }

    /// Builds a store from in-memory documents. Records with empty text or
    /// title are rejected and counted; duplicate titles get ` (doc_id)`
    /// appended.
    pub fn from_documents(
        docs: impl IntoIterator<Item = Document>,
        max_words: usize,
    ) -> Result<Self> {
        if max_words == 0 {
            return Err(Error::Config("max_words must be >= 1".into()));
        }
        let mut documents: Vec<Document> = Vec::new();
        let mut passages = Vec::new();
        let mut seen_ids: HashMap<String, ()> = HashMap::new();
        let mut seen_titles: HashMap<String, ()> = HashMap::new();
        let mut rejected = 0;
        let mut title_collisions = 0;

        for doc in docs {
            let text = normalize_whitespace(&doc.text);
            let mut title = normalize_whitespace(&doc.title);
            if seen_ids.contains_key(&doc.doc_id) {
                return Err(Error::DuplicateDocId(doc.doc_id));
            }
            if text.is_empty() || title.is_empty() || doc.doc_id.is_empty() {
                rejected += 1;
                continue;
            }
            if seen_titles.contains_key(&title) {
                title_collisions += 1;
                while seen_titles.contains_key(&title) {
                    title = format!("{title} ({})", doc.doc_id);
                }
            }
            seen_ids.insert(doc.doc_id.clone(), ());
            seen_titles.insert(title.clone(), ());
            let doc = Document {
                doc_id: doc.doc_id,
                title,
                text,
            };
            passages.extend(chunk_document(&doc, max_words)?);
            documents.push(doc);
        }
        Ok(Self::assemble(
            max_words,
            documents,
            passages,
            rejected,
            title_collisions,
        ))
    }

    pub fn max_words(&self) -> usize {
        self.max_words
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.doc_index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn passage(&self, passage_id: &str) -> Option<&Passage> {
        self.passage_index.get(passage_id).map(|&i| &self.passages[i])
    }

    pub fn doc_id_for_title(&self, title: &str) -> Option<&str> {
        self.title_index.get(title).map(String::as_str)
    }

    /// Passages of one document in ordinal order.
    pub fn passages_of(&self, doc_id: &str) -> &[Passage] {
        match self.doc_index.get(doc_id) {
            Some(&i) => &self.passages[self.doc_passages[i].clone()],
            None => &[],
        }
    }

    /// Index range of a document's passages within [`passages`](Self::passages).
    pub fn passage_range(&self, doc_id: &str) -> Option<Range<usize>> {
        self.doc_index
            .get(doc_id)
            .map(|&i| self.doc_passages[i].clone())
    }

    /// Records dropped at ingest because of empty text or title.
    /// Every title (document order) followed by every passage text: the
    /// default training texts for the reference model.
    pub fn texts(&self) -> Vec<&str> {
        self.documents
            .iter()
            .map(|d| d.title.as_str())
            .chain(self.passages.iter().map(|p| p.text.as_str()))
            .collect()
    }

    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn title_collisions(&self) -> usize {
        self.title_collisions
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }
}

/// Reads a JSONL corpus (`doc_id`, `title`, `text` per line) and chunks it.
pub fn ingest_corpus(source: impl BufRead, max_words: usize) -> Result<CorpusStore> {
    let mut docs = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(Document {
            doc_id: rec.doc_id,
            title: rec.title,
            text: rec.text,
        });
    }
    CorpusStore::from_documents(docs, max_words)
}

pub fn ingest_corpus_file(path: impl AsRef<Path>, max_words: usize) -> Result<CorpusStore> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_corpus(std::io::BufReader::new(file), max_words)
}

/// Width of the word-count histogram buckets in [`StatsReport`].
pub const HISTOGRAM_BUCKET: usize = 25;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub num_docs: usize,
    pub num_passages: usize,
    pub total_words: usize,
    pub max_passage_words: usize,
    /// Bucket lower bound -> passage count.
    pub word_histogram: BTreeMap<usize, usize>,
    pub title_collisions: usize,
    pub hard_splits: usize,
    pub rejected: usize,
}

pub fn corpus_stats(store: &CorpusStore) -> StatsReport {
    let mut report = StatsReport {
        num_docs: store.documents.len(),
        num_passages: store.passages.len(),
        title_collisions: store.title_collisions,
        rejected: store.rejected,
        ..Default::default()
    };
    for p in &store.passages {
        report.total_words += p.word_count;
        report.max_passage_words = report.max_passage_words.max(p.word_count);
        *report
            .word_histogram
            .entry(p.word_count / HISTOGRAM_BUCKET * HISTOGRAM_BUCKET)
            .or_default() += 1;
        report.hard_splits += p.hard_split as usize;
    }
    report
}
