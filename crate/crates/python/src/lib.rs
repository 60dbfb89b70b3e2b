//! Python bindings: build a store and index, train the reference model,
//! search, rerank, answer and score runs.
//!
//! Structured results cross the boundary as plain dicts and lists.

use std::sync::Arc;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use selfret::corpus::{CorpusStore, Document};
use selfret::engine::open_lm;
use selfret::eval::{evaluate, parse_answers, Level, RunFile};
use selfret::index::TrieIndex;
use selfret::lm::NGramLm;
use selfret::qrels::Qrels;
use selfret::rank::ExternalPassage;
use selfret::tokenization::Tokenizer;
use selfret::{Config, Engine};

fn to_py(err: selfret::Error) -> PyErr {
    if err.is_data_error() {
        PyValueError::new_err(err.to_string())
    } else {
        PyRuntimeError::new_err(err.to_string())
    }
}

/// Converts through JSON so nested results become dicts and lists.
fn to_object<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn load_config(path: Option<&str>) -> PyResult<Config> {
    match path {
        Some(p) => Config::load(p).map_err(to_py),
        None => Ok(Config::default()),
    }
}

/// Chunked passages of a corpus.
#[pyclass(frozen)]
struct Corpus {
    store: Arc<CorpusStore>,
}

#[pymethods]
impl Corpus {
    /// `documents` is a list of `(doc_id, title, text)` tuples.
    #[new]
    #[pyo3(signature = (documents, max_words = 200))]
    fn new(documents: Vec<(String, String, String)>, max_words: usize) -> PyResult<Self> {
        let docs = documents.into_iter().map(|(doc_id, title, text)| Document { doc_id, title, text });
        let store = CorpusStore::from_documents(docs, max_words).map_err(to_py)?;
        Ok(Corpus { store: Arc::new(store) })
    }

    /// Reads corpus JSONL (`doc_id`, `title`, `text` per line).
    #[staticmethod]
    #[pyo3(signature = (path, max_words = 200))]
    fn ingest(path: &str, max_words: usize) -> PyResult<Self> {
        let store = selfret::corpus::ingest_corpus_file(path, max_words).map_err(to_py)?;
        Ok(Corpus { store: Arc::new(store) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Corpus { store: Arc::new(CorpusStore::load(path).map_err(to_py)?) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.store.save(path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.store.passages().len()
    }

    fn passages(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &self.store.passages())
    }
}

/// Title and passage tries with their vocabulary.
#[pyclass(frozen)]
struct Index {
    index: Arc<TrieIndex>,
}

#[pymethods]
impl Index {
    /// `extra_texts` add words (queries, answers) to the vocabulary.
    #[staticmethod]
    #[pyo3(signature = (corpus, extra_texts = Vec::new()))]
    fn build(py: Python<'_>, corpus: &Corpus, extra_texts: Vec<String>) -> PyResult<Self> {
        let store = corpus.store.clone();
        let index = py
            .detach(move || {
                let mut texts = Config::default().vocab_texts();
                texts.extend(extra_texts);
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                TrieIndex::build(&store, &Tokenizer::build(&store, &refs))
            })
            .map_err(to_py)?;
        Ok(Index { index: Arc::new(index) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Index { index: Arc::new(TrieIndex::load(path).map_err(to_py)?) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.index.save(path).map_err(to_py)
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &self.index.stats())
    }

    fn vocab_size(&self) -> usize {
        self.index.tokenizer().vocab_size()
    }
}

/// Trains the n-gram reference model over the corpus and writes it to `path`.
#[pyfunction]
#[pyo3(signature = (corpus, index, path, order = 3, k = 0.1))]
fn train_ngram(py: Python<'_>, corpus: &Corpus, index: &Index, path: &str, order: usize, k: f64) -> PyResult<()> {
    let (store, idx) = (corpus.store.clone(), index.index.clone());
    let lm = py
        .detach(move || NGramLm::train(&store.texts(), idx.tokenizer(), order, k))
        .map_err(to_py)?;
    lm.save(path).map_err(to_py)
}

/// Index, model and configuration ready to answer queries.
#[pyclass(frozen, name = "Engine")]
struct PyEngine {
    engine: Engine,
}

#[pymethods]
impl PyEngine {
    /// `lm` is `uniform`, an n-gram model file, `cmd:<command>` or an HTTP URL.
    #[new]
    #[pyo3(signature = (index, lm, config = None))]
    fn new(index: &Index, lm: &str, config: Option<&str>) -> PyResult<Self> {
        let config = load_config(config)?;
        let timeout = Duration::from_millis(config.lm.timeout_ms);
        let model = open_lm(lm, index.index.tokenizer().vocab_size(), timeout).map_err(to_py)?;
        let engine = Engine::new(index.index.clone(), model, config).map_err(to_py)?;
        Ok(PyEngine { engine })
    }

    /// Retrieved and reranked passages, best first.
    #[pyo3(signature = (query, k = None))]
    fn search(&self, py: Python<'_>, query: &str, k: Option<usize>) -> PyResult<Py<PyAny>> {
        let mut results = py.detach(|| self.engine.search(query)).map_err(to_py)?;
        if let Some(k) = k {
            results.truncate(k);
        }
        to_object(py, &results)
    }

    /// Reranks `(passage_id, title, text)` tuples from another retriever.
    fn rerank(&self, py: Python<'_>, query: &str, passages: Vec<(String, String, String)>) -> PyResult<Py<PyAny>> {
        let passages: Vec<ExternalPassage> = passages
            .into_iter()
            .map(|(passage_id, title, text)| ExternalPassage { passage_id, title, text })
            .collect();
        let results = py.detach(|| self.engine.rerank_external(query, &passages)).map_err(to_py)?;
        to_object(py, &results)
    }

    fn answer(&self, py: Python<'_>, query: &str) -> PyResult<Py<PyAny>> {
        let result = py.detach(|| self.engine.answer(query)).map_err(to_py)?;
        to_object(py, &result)
    }
}

/// Scores a run file against qrels; returns the metrics report as a dict.
#[pyfunction]
#[pyo3(signature = (run, qrels, level = "passage", answers = None))]
fn evaluate_run(py: Python<'_>, run: &str, qrels: &str, level: &str, answers: Option<&str>) -> PyResult<Py<PyAny>> {
    let level: Level = level.parse().map_err(to_py)?;
    let run = RunFile::load(run).map_err(to_py)?;
    let qrels = Qrels::load(qrels).map_err(to_py)?;
    let answers = match answers {
        Some(path) => {
            let file = std::fs::File::open(path)?;
            Some(parse_answers(std::io::BufReader::new(file)).map_err(to_py)?)
        }
        None => None,
    };
    to_object(py, &evaluate(&run, &qrels, level, answers.as_ref()))
}

#[pymodule]
fn selfret_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Index>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(train_ngram, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run, m)?)?;
    Ok(())
}
