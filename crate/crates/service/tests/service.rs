use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use selfret::corpus::{CorpusStore, Document};
use selfret::index::TrieIndex;
use selfret::lm::{LanguageModel, LmError, NGramLm, UniformLm};
use selfret::rank::ExternalPassage;
use selfret::tokenization::{TokenId, Tokenizer, EOS, SEP};
use selfret::{Config, Engine};
use selfret_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn doc(id: &str, title: &str, text: &str) -> Document {
    Document {
        doc_id: id.into(),
        title: title.into(),
        text: text.into(),
    }
}

fn f1() -> Vec<Document> {
    vec![
        doc("d1", "apple pie", "apple pie is sweet. apple pie uses flour."),
        doc("d2", "apple tree", "apple tree grows tall."),
        doc("d3", "banana bread", "banana bread is moist."),
    ]
}

fn index_of(docs: Vec<Document>, extra: &[&str]) -> TrieIndex {
    let store = CorpusStore::from_documents(docs, 200).unwrap();
    let mut texts = Config::default().vocab_texts();
    texts.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let tok = Tokenizer::build(&store, &refs);
    TrieIndex::build(&store, &tok).unwrap()
}

fn bigram_engine(docs: Vec<Document>, config: Config) -> Engine {
    let store = CorpusStore::from_documents(docs.clone(), 200).unwrap();
    let index = index_of(docs, &[]);
    let lm = NGramLm::train(&store.texts(), index.tokenizer(), 2, 0.1).unwrap();
    Engine::new(Arc::new(index), Arc::new(lm), config).unwrap()
}

async fn call(state: &AppState, method: &str, path: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(path);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn without_timing(mut v: Value) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("timing_ms");
    }
    v
}

#[tokio::test]
async fn single_document_retrieves_with_full_score() {
    let state = AppState::ready(bigram_engine(vec![doc("only", "solo", "just one passage.")], Config::default()));
    let (status, body) = call(&state, "POST", "/retrieve", Some(json!({"query": "one", "k": 1}))).await;
    assert_eq!(status, StatusCode::OK);
    let results = body["results"].as_array().unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0]["passage_id"], "only#0");
    assert!((results[0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(body["timing_ms"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn retrieve_is_deterministic_and_bounded_by_k() {
    let engine = bigram_engine(f1(), Config::default());
    let offline = engine.search("apple pie recipe").unwrap();
    let state = AppState::ready(engine);
    let req = json!({"query": "apple pie recipe", "k": 50});
    let (_, a) = call(&state, "POST", "/retrieve", Some(req.clone())).await;
    let (_, b) = call(&state, "POST", "/retrieve", Some(req)).await;
    assert_eq!(without_timing(a.clone()), without_timing(b));
    let results = a["results"].as_array().unwrap();
    assert!(results.len() <= 50);
    assert_eq!(results.len(), offline.len());
    assert_eq!(a["results"], serde_json::to_value(&offline).unwrap());

    let (_, top2) = call(&state, "POST", "/retrieve", Some(json!({"query": "apple pie recipe", "k": 2}))).await;
    assert_eq!(top2["results"].as_array().unwrap()[..], results[..2]);
}

#[tokio::test]
async fn bad_requests_get_structured_errors() {
    let state = AppState::ready(bigram_engine(f1(), Config::default()));
    for (path, body) in [
        ("/retrieve", json!({"query": "  ", "k": 3})),
        ("/retrieve", json!({"query": "apple", "k": 0})),
        ("/retrieve", json!({"k": 3})),
        ("/answer", json!({"query": ""})),
        ("/rerank", json!({"query": "apple", "passages": []})),
        (
            "/rerank",
            json!({"query": "apple", "passages": [
                {"passage_id": "x", "title": "apple pie", "text": "a"},
                {"passage_id": "x", "title": "apple pie", "text": "b"}]}),
        ),
    ] {
        let (status, err) = call(&state, "POST", path, Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(err["code"], "bad_request");
        assert!(!err["message"].as_str().unwrap().is_empty());
    }
    let req = Request::builder()
        .method("POST")
        .uri("/retrieve")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

fn synthetic_passages(n: usize) -> Vec<ExternalPassage> {
    let titles = ["apple pie", "apple tree", "banana bread", "unseen words here"];
    (0..n)
        .map(|i| ExternalPassage {
            passage_id: format!("p{i:03}"),
            title: titles[i % titles.len()].into(),
            text: format!("apple {} banana tree {}", "pie ".repeat(i % 5), "bread ".repeat(i % 3)),
        })
        .collect()
}

#[tokio::test]
async fn rerank_matches_library_and_ignores_input_order() {
    let engine = bigram_engine(f1(), Config::default());
    let passages = synthetic_passages(100);
    let offline = engine.rerank_external("apple pie", &passages).unwrap();
    let state = AppState::ready(engine);
    let (status, body) = call(&state, "POST", "/rerank", Some(json!({"query": "apple pie", "passages": passages}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::to_string(&body["results"]).unwrap(),
        serde_json::to_string(&serde_json::to_value(&offline).unwrap()).unwrap()
    );

    let mut reversed = passages.clone();
    reversed.reverse();
    let (_, again) = call(&state, "POST", "/rerank", Some(json!({"query": "apple pie", "passages": reversed}))).await;
    assert_eq!(again["results"], body["results"]);

    let (_, one) = call(&state, "POST", "/rerank", Some(json!({"query": "apple pie", "passages": &passages[..1]}))).await;
    assert_eq!(one["results"].as_array().unwrap().len(), 1);
    assert!((one["results"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

/// Uniform, except that after a separator it says `answer` and then stops.
struct ScriptedAnswerLm {
    vocab: usize,
    answer: TokenId,
}

impl LanguageModel for ScriptedAnswerLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let favoured = match context.last() {
            Some(&SEP) => self.answer,
            Some(&t) if t == self.answer => EOS,
            _ => return Ok(vec![-(self.vocab as f64).ln(); self.vocab]),
        };
        let mut out = vec![(0.1 / (self.vocab - 1) as f64).ln(); self.vocab];
        out[favoured as usize] = 0.9f64.ln();
        Ok(out)
    }

    fn descriptor(&self) -> String {
        "scripted-answer".into()
    }
}

#[tokio::test]
async fn answer_uses_the_top_passage() {
    let index = index_of(f1(), &["paris"]);
    let lm = ScriptedAnswerLm {
        vocab: index.tokenizer().vocab_size(),
        answer: index.tokenizer().id("paris").unwrap(),
    };
    let engine = Engine::new(Arc::new(index), Arc::new(lm), Config::default()).unwrap();
    let offline = engine.answer("capital of france").unwrap();
    let state = AppState::ready(engine);
    let (status, body) = call(&state, "POST", "/answer", Some(json!({"query": "capital of france"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["answer"], "paris");
    assert_eq!(body["truncated"], false);
    assert_eq!(body["passage_id"], offline.answer.passage_id.as_str());
    assert_eq!(body["results"][0]["passage_id"], body["passage_id"]);
}

#[tokio::test]
async fn empty_index_is_a_server_error() {
    let index = index_of(vec![], &[]);
    let vocab = index.tokenizer().vocab_size();
    let engine = Engine::new(Arc::new(index), Arc::new(UniformLm::new(vocab)), Config::default()).unwrap();
    let state = AppState::ready(engine);
    for path in ["/answer", "/retrieve"] {
        let (status, err) = call(&state, "POST", path, Some(json!({"query": "apple"}))).await;
        assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
        assert_eq!(err["code"], "empty_index");
        assert!(err["message"].as_str().unwrap().contains("empty index"));
    }
}

#[tokio::test]
async fn health_reports_loading_then_ready() {
    let state = AppState::loading(4, Duration::from_secs(5));
    let (status, err) = call(&state, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(err["code"], "loading");
    let (status, _) = call(&state, "POST", "/retrieve", Some(json!({"query": "apple"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let engine = bigram_engine(f1(), Config::default());
    let stats = engine.index.stats();
    state.set_engine(engine);
    let (status, body) = call(&state, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ready");
    assert_eq!(body["index_stats"], serde_json::to_value(&stats).unwrap());
    assert_eq!(body["index_stats"]["title_trie"]["leaf_count"], 3);
    assert_eq!(body["index_stats"]["num_passages"], 3);

    let (status, body) = call(&state, "GET", "/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["decode"]["title_beam"], 5);
    assert_eq!(body["rank"]["tau"], 0.4);
}

/// Uniform, but every call sleeps first.
struct SlowLm(UniformLm, Duration);

impl LanguageModel for SlowLm {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        std::thread::sleep(self.1);
        self.0.next_logprobs(context)
    }

    fn descriptor(&self) -> String {
        "slow".into()
    }
}

fn slow_engine(delay: Duration, config: Config) -> Engine {
    let index = index_of(f1(), &[]);
    let vocab = index.tokenizer().vocab_size();
    Engine::new(Arc::new(index), Arc::new(SlowLm(UniformLm::new(vocab), delay)), config).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn over_capacity_requests_are_refused() {
    let mut config = Config::default();
    config.service.max_concurrent = 1;
    let state = AppState::ready(slow_engine(Duration::from_millis(20), config));
    let req = json!({"query": "apple pie"});
    let (a, b) = tokio::join!(
        call(&state, "POST", "/retrieve", Some(req.clone())),
        async {
            tokio::time::sleep(Duration::from_millis(30)).await;
            call(&state, "POST", "/retrieve", Some(req.clone())).await
        }
    );
    let statuses = [a.0, b.0];
    assert!(statuses.contains(&StatusCode::OK), "{statuses:?}");
    assert!(statuses.contains(&StatusCode::SERVICE_UNAVAILABLE), "{statuses:?}");
    let refused = if a.0 == StatusCode::OK { b.1 } else { a.1 };
    assert_eq!(refused["code"], "overloaded");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn slow_requests_time_out() {
    let mut config = Config::default();
    config.service.request_timeout_ms = 50;
    let state = AppState::ready(slow_engine(Duration::from_millis(40), config));
    let (status, err) = call(&state, "POST", "/retrieve", Some(json!({"query": "apple pie"}))).await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(err["code"], "timeout");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let state = AppState::ready(bigram_engine(f1(), Config::default()));
    let req = json!({"query": "banana bread apple", "k": 5});
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let (state, req) = (state.clone(), req.clone());
            tokio::spawn(async move { call(&state, "POST", "/retrieve", Some(req)).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(without_timing(body));
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_over_tcp_after_loading_from_disk() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    let dir = std::env::temp_dir().join(format!("selfret-service-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let index_path = dir.join("index.bin");
    index_of(f1(), &[]).save(&index_path).unwrap();

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let cfg = ServiceConfig {
        listen: addr,
        index_path,
        lm: "uniform".into(),
        config: Config::default(),
    };
    let server = tokio::spawn(selfret_service::serve_on(listener, cfg));

    let mut last = String::new();
    for _ in 0..100 {
        let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
        s.write_all(b"GET /health HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n")
            .await
            .unwrap();
        last.clear();
        s.read_to_string(&mut last).await.unwrap();
        if last.starts_with("HTTP/1.1 200") {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(last.starts_with("HTTP/1.1 200"), "{last}");
    assert!(last.contains("\"status\":\"ready\""));
    assert!(last.contains("uniform"));
    server.abort();
    let _ = std::fs::remove_dir_all(dir);
}
