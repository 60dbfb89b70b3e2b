//! HTTP front end for an [`Engine`].
//!
//! | route            | request                                  | response |
//! |------------------|------------------------------------------|----------|
//! | `POST /retrieve` | `{"query": "...", "k": 10}`              | `{"results": [ScoredPassage], "timing_ms": 1.2}` |
//! | `POST /rerank`   | `{"query": "...", "passages": [{"passage_id", "title", "text"}]}` | `{"results": [...], "timing_ms": ...}` |
//! | `POST /answer`   | `{"query": "..."}`                       | `{"answer", "passage_id", "truncated", "results", "timing_ms"}` |
//! | `GET /health`    |                                          | `{"status": "ready", "index_stats", "lm_descriptor", "uptime_s"}` |
//! | `GET /stats`     |                                          | `{"index_stats", "lm_descriptor", "decode", "rank"}` |
//!
//! Errors are `{"code": "...", "message": "..."}` with status 400 for bad
//! requests, 503 while loading or when too many requests are in flight,
//! 504 when the model or the request budget times out, 502 for other model
//! backend failures and 500 otherwise (an empty index included).

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use selfret::engine::open_lm;
use selfret::index::{IndexStats, TrieIndex};
use selfret::lm::LmError;
use selfret::rank::{ExternalPassage, ScoredPassage};
use selfret::{Config, Engine, Error};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

/// Everything needed to start the service.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub index_path: PathBuf,
    /// Model descriptor, as accepted by [`open_lm`].
    pub lm: String,
    pub config: Config,
}

impl ServiceConfig {
    fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.config.service.request_timeout_ms)
    }
}

/// Opens the index and model named by `cfg`.
pub fn load_engine(cfg: &ServiceConfig) -> selfret::Result<Engine> {
    let index = TrieIndex::load(&cfg.index_path)?;
    let lm = open_lm(
        &cfg.lm,
        index.tokenizer().vocab_size(),
        Duration::from_millis(cfg.config.lm.timeout_ms),
    )?;
    Engine::new(Arc::new(index), lm, cfg.config.clone())
}

struct Shared {
    engine: OnceLock<Arc<Engine>>,
    permits: Arc<Semaphore>,
    timeout: Duration,
    started: Instant,
}

/// Handle to the service state. Starts out loading; requests get 503 until
/// [`AppState::set_engine`] is called.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn loading(max_concurrent: usize, timeout: Duration) -> Self {
        AppState(Arc::new(Shared {
            engine: OnceLock::new(),
            permits: Arc::new(Semaphore::new(max_concurrent)),
            timeout,
            started: Instant::now(),
        }))
    }

    pub fn ready(engine: Engine) -> Self {
        let s = &engine.config.service;
        let state = Self::loading(s.max_concurrent, Duration::from_millis(s.request_timeout_ms));
        state.set_engine(engine);
        state
    }

    /// Installs the engine. Later calls are ignored: state is immutable once
    /// loaded.
    pub fn set_engine(&self, engine: Engine) {
        let _ = self.0.engine.set(Arc::new(engine));
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.0
            .engine
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "loading", "index and model are still loading"))
    }

    /// Runs `work` on the blocking pool under the concurrency limit and the
    /// request budget. The permit is held until the work actually finishes,
    /// even if the caller has already been answered with a timeout.
    async fn run<T, F>(&self, work: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&Engine) -> selfret::Result<T> + Send + 'static,
    {
        let engine = self.engine()?;
        let permit = self.0.permits.clone().try_acquire_owned().map_err(|_| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "overloaded", "too many requests in flight")
        })?;
        let task = tokio::task::spawn_blocking(move || {
            let out = work(&engine);
            drop(permit);
            out
        });
        match tokio::time::timeout(self.0.timeout, task).await {
            Err(_) => Err(ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                "timeout",
                format!("request exceeded {:?}", self.0.timeout),
            )),
            Ok(Err(join)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", join.to_string())),
            Ok(Ok(out)) => out.map_err(ApiError::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::DuplicateCandidate(_) | Error::Config(_) => Self::bad_request(message),
            Error::EmptyIndex => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "empty_index", message),
            Error::Lm(LmError::Timeout(_)) => Self::new(StatusCode::GATEWAY_TIMEOUT, "lm_timeout", message),
            Error::Lm(_) => Self::new(StatusCode::BAD_GATEWAY, "lm_error", message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub query: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RerankRequest {
    pub query: String,
    pub passages: Vec<ExternalPassage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsResponse {
    pub results: Vec<ScoredPassage>,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub answer: String,
    pub passage_id: String,
    pub truncated: bool,
    pub results: Vec<ScoredPassage>,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub index_stats: IndexStats,
    pub lm_descriptor: String,
    pub uptime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub index_stats: IndexStats,
    pub lm_descriptor: String,
    pub decode: selfret::config::DecodeConfig,
    pub rank: selfret::config::RankConfig,
}

fn check_query(query: &str) -> Result<(), ApiError> {
    if query.trim().is_empty() {
        return Err(ApiError::bad_request("query must not be empty"));
    }
    Ok(())
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

async fn retrieve(
    State(state): State<AppState>,
    body: Result<Json<RetrieveRequest>, JsonRejection>,
) -> Result<Json<ResultsResponse>, ApiError> {
    let t = Instant::now();
    let Json(req) = body?;
    check_query(&req.query)?;
    if req.k == 0 {
        return Err(ApiError::bad_request("k must be >= 1"));
    }
    let mut results = state.run(move |e| e.search(&req.query)).await?;
    results.truncate(req.k);
    Ok(Json(ResultsResponse {
        results,
        timing_ms: elapsed_ms(t),
    }))
}

async fn rerank(
    State(state): State<AppState>,
    body: Result<Json<RerankRequest>, JsonRejection>,
) -> Result<Json<ResultsResponse>, ApiError> {
    let t = Instant::now();
    let Json(req) = body?;
    check_query(&req.query)?;
    if req.passages.is_empty() {
        return Err(ApiError::bad_request("passages must not be empty"));
    }
    let results = state
        .run(move |e| e.rerank_external(&req.query, &req.passages))
        .await?;
    Ok(Json(ResultsResponse {
        results,
        timing_ms: elapsed_ms(t),
    }))
}

async fn answer(
    State(state): State<AppState>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<AnswerResponse>, ApiError> {
    let t = Instant::now();
    let Json(req) = body?;
    check_query(&req.query)?;
    let out = state.run(move |e| e.answer(&req.query)).await?;
    Ok(Json(AnswerResponse {
        answer: out.answer.answer,
        passage_id: out.answer.passage_id,
        truncated: out.answer.truncated,
        results: out.results,
        timing_ms: elapsed_ms(t),
    }))
}

async fn health(State(state): State<AppState>) -> Result<Json<HealthResponse>, ApiError> {
    let engine = state.engine()?;
    Ok(Json(HealthResponse {
        status: "ready".into(),
        index_stats: engine.index.stats(),
        lm_descriptor: engine.lm.descriptor(),
        uptime_s: state.0.started.elapsed().as_secs_f64(),
    }))
}

async fn stats(State(state): State<AppState>) -> Result<Json<StatsResponse>, ApiError> {
    let engine = state.engine()?;
    Ok(Json(StatsResponse {
        index_stats: engine.index.stats(),
        lm_descriptor: engine.lm.descriptor(),
        decode: engine.config.decode.clone(),
        rank: engine.config.rank.clone(),
    }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/retrieve", post(retrieve))
        .route("/rerank", post(rerank))
        .route("/answer", post(answer))
        .route("/health", get(health))
        .route("/stats", get(stats))
        .with_state(state)
}

/// Binds, starts answering (503 until loaded), loads the engine in the
/// background and serves until the process ends. A load failure is
/// returned and stops the server.
pub async fn serve(cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    serve_on(listener, cfg).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, cfg: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::loading(cfg.config.service.max_concurrent, cfg.request_timeout());
    let loader_state = state.clone();
    let loader = tokio::task::spawn_blocking(move || load_engine(&cfg).map(|e| loader_state.set_engine(e)));
    let server = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    let failure = match loader.await {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(e) => Some(e.to_string()),
    };
    if let Some(message) = failure {
        server.abort();
        return Err(std::io::Error::other(message));
    }
    server.await.map_err(std::io::Error::other)?
}
