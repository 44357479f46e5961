//! HTTP service over the knowledge base.
//!
//! Reads share one immutable index snapshot per request; writes go through a
//! single mutex, persist the base to disk, and swap in a freshly built
//! index. Model calls and other blocking work run on the blocking thread
//! pool, never on the async workers.

use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use expkb::builder::{build_kb, load_raw_logs, BuildReport};
use expkb::evolution::{apply_prune, EvolutionConfig, PrunedEntry};
use expkb::pipeline::script::PipelineScript;
use expkb::pipeline::{run_pipeline, Executor, FeedbackPool, PipelineInput, PipelineReport, Reasoner};
use expkb::retrieval::{KbIndex, RetrievalResult};
use expkb::semantic::{EmbeddingProvider, HashEmbedder};
use expkb::store::{Experience, ExperienceId, KnowledgeBase};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::adapters::{HttpEmbedder, HttpExecutor, HttpReasoner};
use crate::config::ServiceConfig;
use crate::query::{run_retrieve, RetrieveRequest};

/// Stable machine-readable error body. Human text is advisory only.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
    }

    fn unconfigured(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unconfigured", message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code,
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

pub struct AppState {
    kb: Mutex<KnowledgeBase>,
    index: RwLock<Arc<KbIndex>>,
    provider: Arc<dyn EmbeddingProvider>,
    reasoner: Option<Arc<dyn Reasoner>>,
    executor: Option<Arc<dyn Executor>>,
    config: ServiceConfig,
    auth_token: Option<String>,
    pipeline_permits: Arc<Semaphore>,
}

impl AppState {
    pub fn index(&self) -> Arc<KbIndex> {
        self.index.read().expect("index lock").clone()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }
}

/// Loads the knowledge base, refusing to start on a corrupt file, and wires
/// up the configured adapters. Construct outside any async runtime: HTTP
/// adapters own blocking clients.
pub fn build_state(config: ServiceConfig) -> anyhow::Result<Arc<AppState>> {
    config.validate()?;
    let auth_token = config.auth_token()?;

    let kb_file = config.kb_file();
    let kb = if kb_file.exists() {
        let file = std::fs::File::open(&kb_file)?;
        let (kb, report) = KnowledgeBase::load_from(file)?;
        if let Some(first) = report.line_errors.first() {
            anyhow::bail!(
                "knowledge base {} is corrupt; first bad record at line {}: {}",
                kb_file.display(),
                first.line,
                first.message
            );
        }
        for (source, target) in &report.dangling_relations {
            tracing::warn!(
                source = %source.as_str(),
                target = %target.as_str(),
                "relation points at a missing experience"
            );
        }
        kb
    } else {
        KnowledgeBase::new()
    };

    let provider: Arc<dyn EmbeddingProvider> = match &config.embedding {
        Some(endpoint) => Arc::new(HttpEmbedder::new(endpoint)?),
        None => Arc::new(HashEmbedder::new(config.stub_embedding_dim)),
    };
    let reasoner: Option<Arc<dyn Reasoner>> = match &config.reasoner {
        Some(endpoint) => Some(Arc::new(HttpReasoner::new(endpoint)?)),
        None => None,
    };
    let executor: Option<Arc<dyn Executor>> = match &config.executor {
        Some(endpoint) => Some(Arc::new(HttpExecutor::new(endpoint)?)),
        None => None,
    };

    let index = Arc::new(KbIndex::build(kb.snapshot(), provider.clone())?);
    let permits = config.max_concurrent_pipelines;
    Ok(Arc::new(AppState {
        kb: Mutex::new(kb),
        index: RwLock::new(index),
        provider,
        reasoner,
        executor,
        auth_token,
        pipeline_permits: Arc::new(Semaphore::new(permits)),
        config,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/experiences", post(add_experience))
        .route("/experiences/{id}", get(get_experience))
        .route("/retrieve", post(retrieve))
        .route("/pipeline", post(pipeline))
        .route("/ingest/logs", post(ingest_logs))
        .route("/admin/prune", post(admin_prune))
        .with_state(state)
}

/// Binds the configured address and serves until ctrl-c.
pub async fn run(state: Arc<AppState>) -> anyhow::Result<()> {
    let bind = state.config.bind.clone();
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    tracing::info!(address = %listener.local_addr()?, "service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Folds a body-extraction rejection into the stable error shape.
fn parse_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    match body {
        Ok(Json(value)) => Ok(value),
        Err(rejection) => Err(ApiError::bad_request(rejection.body_text())),
    }
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = &state.auth_token else {
        return Ok(());
    };
    let presented = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok());
    if presented == Some(format!("Bearer {expected}").as_str()) {
        Ok(())
    } else {
        Err(ApiError::unauthorized())
    }
}

/// Persists the base and swaps in a rebuilt index. Call with the kb lock
/// held so writers serialize; blocking work only.
fn commit(state: &AppState, kb: &KnowledgeBase) -> Result<(), ApiError> {
    crate::persist_kb_atomic(&state.config.kb_file(), kb)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let index = KbIndex::build(kb.snapshot(), state.provider.clone())
        .map_err(|e| ApiError::internal(e.to_string()))?;
    *state.index.write().expect("index lock") = Arc::new(index);
    Ok(())
}

async fn blocking<T, F>(work: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(work)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

#[derive(Serialize)]
struct HealthBody {
    status: &'static str,
    entries: usize,
    version: u64,
}

async fn health(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
) -> Result<Json<HealthBody>, ApiError> {
    authorize(&state, &headers)?;
    let index = state.index();
    Ok(Json(HealthBody {
        status: "ok",
        entries: index.len(),
        version: index.version(),
    }))
}

#[derive(Serialize)]
struct InsertedBody {
    id: ExperienceId,
}

async fn add_experience(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<Experience>, JsonRejection>,
) -> Result<(StatusCode, Json<InsertedBody>), ApiError> {
    authorize(&state, &headers)?;
    let draft = parse_body(body)?;
    let id = blocking(move || {
        let mut kb = state.kb.lock().expect("kb lock");
        let id = kb.insert(draft).map_err(|e| match e {
            expkb::store::StoreError::PreassignedId(_) => ApiError::bad_request(e.to_string()),
            expkb::store::StoreError::Invalid(_) => ApiError::bad_request(e.to_string()),
            other => ApiError::conflict(other.to_string()),
        })?;
        commit(&state, &kb)?;
        Ok(id)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(InsertedBody { id })))
}

async fn get_experience(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Experience>, ApiError> {
    authorize(&state, &headers)?;
    let id = ExperienceId::new(id);
    let kb = state.kb.lock().expect("kb lock");
    match kb.get(&id) {
        Some(experience) => Ok(Json(experience.as_ref().clone())),
        None => Err(ApiError::not_found(format!("no experience {}", id.as_str()))),
    }
}

async fn retrieve(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<RetrieveRequest>, JsonRejection>,
) -> Result<Json<RetrievalResult>, ApiError> {
    authorize(&state, &headers)?;
    let request = parse_body(body)?;
    let index = state.index();
    let base = state.config.retrieval.clone();
    let result = blocking(move || {
        run_retrieve(&index, &base, &request).map_err(|e| ApiError::bad_request(e.to_string()))
    })
    .await?;
    Ok(Json(result))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineRequest {
    query: String,
    #[serde(default)]
    expected_answer: Option<String>,
    /// Inline script standing in for the configured reasoner and executor.
    #[serde(default)]
    script: Option<PipelineScript>,
}

async fn pipeline(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<PipelineRequest>, JsonRejection>,
) -> Result<Json<PipelineReport>, ApiError> {
    authorize(&state, &headers)?;
    let request = parse_body(body)?;
    let _permit = state
        .pipeline_permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let index = state.index();
    let config = state.config.pipeline.clone();
    let report = blocking(move || {
        let input = PipelineInput {
            query: request.query,
            expected_answer: request.expected_answer,
        };
        let mut pool = FeedbackPool::default();
        let mut run = |reasoner: &dyn Reasoner, executor: &dyn Executor| {
            run_pipeline(&index, reasoner, executor, &config, &input, &mut pool)
                .map_err(|e| ApiError::bad_request(e.to_string()))
        };
        match &request.script {
            Some(script) => {
                let (reasoner, executor) = script
                    .instantiate()
                    .map_err(|e| ApiError::bad_request(e.to_string()))?;
                run(&reasoner, &executor)
            }
            None => {
                let reasoner = state.reasoner.clone().ok_or_else(|| {
                    ApiError::unconfigured("no reasoner endpoint configured; supply a script")
                })?;
                let executor = state.executor.clone().ok_or_else(|| {
                    ApiError::unconfigured("no executor endpoint configured; supply a script")
                })?;
                run(&reasoner, executor.as_ref())
            }
        }
    })
    .await?;
    Ok(Json(report))
}

async fn ingest_logs(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: String,
) -> Result<Json<BuildReport>, ApiError> {
    authorize(&state, &headers)?;
    let reasoner = state
        .reasoner
        .clone()
        .ok_or_else(|| ApiError::unconfigured("log ingestion requires a reasoner endpoint"))?;
    let report = blocking(move || {
        let (logs, line_errors) = load_raw_logs(body.as_bytes())
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        if let Some(first) = line_errors.first() {
            return Err(ApiError::bad_request(format!(
                "bad log at line {}: {}",
                first.line, first.message
            )));
        }
        let now = unix_now();
        let mut kb = state.kb.lock().expect("kb lock");
        let report = build_kb(
            &mut kb,
            state.provider.clone(),
            reasoner.as_ref(),
            &logs,
            &[],
            &state.config.build,
            now,
        )
        .map_err(|e| ApiError::internal(e.to_string()))?;
        commit(&state, &kb)?;
        Ok(report)
    })
    .await?;
    Ok(Json(report))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PruneRequest {
    #[serde(default)]
    now: Option<i64>,
    #[serde(default)]
    threshold: Option<f64>,
    #[serde(default)]
    decay_rate: Option<f64>,
}

#[derive(Serialize)]
struct PruneBody {
    removed: Vec<PrunedEntry>,
    remaining: usize,
    report: String,
}

fn unix_now() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Writes the prune report file: one removed entry per line.
pub fn write_prune_report(
    dir: &std::path::Path,
    now: i64,
    removed: &[PrunedEntry],
) -> std::io::Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("prune-{now}.jsonl"));
    let mut out = String::new();
    for entry in removed {
        out.push_str(&serde_json::to_string(entry).expect("prune entries serialize"));
        out.push('\n');
    }
    std::fs::write(&path, out)?;
    Ok(path)
}

async fn admin_prune(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<PruneRequest>, JsonRejection>,
) -> Result<Json<PruneBody>, ApiError> {
    authorize(&state, &headers)?;
    let request = parse_body(body)?;
    let body = blocking(move || {
        let now = request.now.unwrap_or_else(unix_now);
        let config = EvolutionConfig {
            prune_threshold: request
                .threshold
                .unwrap_or(state.config.evolution.prune_threshold),
            decay_rate: request.decay_rate.unwrap_or(state.config.evolution.decay_rate),
            ..state.config.evolution.clone()
        };
        let mut kb = state.kb.lock().expect("kb lock");
        let removed = apply_prune(&mut kb, now, &config);
        commit(&state, &kb)?;
        let report = write_prune_report(&state.config.data_dir, now, &removed)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(PruneBody {
            remaining: kb.len(),
            removed,
            report: report.display().to_string(),
        })
    })
    .await?;
    Ok(Json(body))
}
