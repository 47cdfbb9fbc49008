//! HTTP/JSON service over the session engine.
//!
//! Mutations of one session are serialized by a per-session lock and run on
//! the blocking pool (live backends block). Reads are served from an
//! immutable snapshot swapped in after every mutation.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coconstruct_core::backends::BackendConfig;
use coconstruct_core::graph::{Artifact, ArtifactId};
use coconstruct_core::session::{Feedback, Session, SessionError, SessionPolicy, SessionState, SessionStatus};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::config::EngineConfig;
use crate::error::ErrorEnvelope;
use crate::store::Store;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub storage: PathBuf,
    pub backend_config: Option<PathBuf>,
    /// Upper bound on concurrent judge calls per tournament round.
    pub parallelism: usize,
    pub log_level: String,
}

impl ServiceConfig {
    /// Applies the `SERVICE_PORT` override and checks the settings.
    pub fn resolve(mut self) -> Result<Self, ErrorEnvelope> {
        if let Ok(port) = std::env::var("SERVICE_PORT") {
            let port: u16 = port
                .trim()
                .parse()
                .map_err(|_| ErrorEnvelope::new("validation", format!("SERVICE_PORT {port:?} is not a valid port")))?;
            self.bind.set_port(port);
        }
        if self.parallelism == 0 {
            return Err(ErrorEnvelope::new("validation", "parallelism must be at least 1"));
        }
        Ok(self)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    envelope: ErrorEnvelope,
}

impl ApiError {
    fn new(status: StatusCode, envelope: ErrorEnvelope) -> Self {
        Self { status, envelope }
    }
}

fn status_for_code(code: &str) -> StatusCode {
    match code {
        "unknown-id" => StatusCode::NOT_FOUND,
        "wrong-status" | "determinism" => StatusCode::CONFLICT,
        "validation" | "schema" => StatusCode::BAD_REQUEST,
        "backend-failure" => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<ErrorEnvelope> for ApiError {
    fn from(envelope: ErrorEnvelope) -> Self {
        Self::new(status_for_code(&envelope.code), envelope)
    }
}

impl From<SessionError> for ApiError {
    fn from(err: SessionError) -> Self {
        // A well-formed id that is not a finalist conflicts with the state.
        let status = match err {
            SessionError::NotFinalist(_) => StatusCode::CONFLICT,
            ref other => status_for_code(other.code()),
        };
        Self::new(status, ErrorEnvelope::from(&err))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.envelope)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ErrorEnvelope::new("validation", format!("invalid request body: {e}")).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub session_id: String,
    pub status: JobStatus,
    pub iteration: Option<usize>,
    pub error: Option<ErrorEnvelope>,
}

struct Slot {
    session: Mutex<Session>,
    snapshot: RwLock<Arc<SessionState>>,
}

impl Slot {
    fn snapshot(&self) -> Arc<SessionState> {
        Arc::clone(&self.snapshot.read().unwrap_or_else(|e| e.into_inner()))
    }
}

struct Inner {
    store: Store,
    registry: BTreeMap<String, BackendConfig>,
    engine: EngineConfig,
    parallelism: usize,
    sessions: Mutex<HashMap<String, Arc<Slot>>>,
    jobs: Mutex<HashMap<String, Job>>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(store: Store, engine: EngineConfig, parallelism: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                store,
                registry: engine.registry(),
                engine,
                parallelism: parallelism.max(1),
                sessions: Mutex::new(HashMap::new()),
                jobs: Mutex::new(HashMap::new()),
            }),
        }
    }

    /// The in-memory slot for `id`, loading it from storage on first use.
    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        let mut sessions = self.inner.sessions.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(slot) = sessions.get(id) {
            return Ok(Arc::clone(slot));
        }
        let state = self.inner.store.load(id)?;
        let session = Session::from_state(state)?;
        let slot = Arc::new(Slot {
            snapshot: RwLock::new(Arc::new(session.state().clone())),
            session: Mutex::new(session),
        });
        sessions.insert(id.to_string(), Arc::clone(&slot));
        Ok(slot)
    }

    fn insert(&self, session: Session) -> ApiResult<Arc<SessionState>> {
        self.inner.store.save(session.state())?;
        let snapshot = Arc::new(session.state().clone());
        let slot = Arc::new(Slot {
            snapshot: RwLock::new(Arc::clone(&snapshot)),
            session: Mutex::new(session),
        });
        self.inner
            .sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(snapshot.session_id.clone(), slot);
        Ok(snapshot)
    }

    /// Runs `op` with exclusive access to the session, then persists and
    /// republishes its state. The state is saved even when `op` fails, since
    /// failed iterations are recorded.
    fn mutate<T>(&self, id: &str, op: impl FnOnce(&mut Session) -> Result<T, SessionError>) -> ApiResult<(T, Arc<SessionState>)> {
        let slot = self.slot(id)?;
        let mut session = slot.session.lock().unwrap_or_else(|e| e.into_inner());
        let before = session.state().event_log.len();
        let result = op(&mut session);
        let snapshot = Arc::new(session.state().clone());
        if snapshot.event_log.len() != before {
            self.inner.store.save(&snapshot)?;
            *slot.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::clone(&snapshot);
        }
        Ok((result?, snapshot))
    }

    fn set_job(&self, job: Job) {
        self.inner
            .jobs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(job.job_id.clone(), job);
    }
}

async fn blocking<T: Send + 'static>(work: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(work)
        .await
        .map_err(|e| ApiError::from(ErrorEnvelope::new("internal", format!("worker failed: {e}"))))?
}

fn document(state: &SessionState) -> Value {
    serde_json::to_value(state.to_document()).expect("session document serializes")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    problem_statement: String,
    #[serde(default)]
    policy: Option<SessionPolicy>,
    #[serde(default)]
    seed: Option<u64>,
    /// Use the configured live backends instead of the mock.
    #[serde(default)]
    live: bool,
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let request: CreateSession = parse_body(&body)?;
    let state = blocking(move || {
        let mut policy = request.policy.unwrap_or_default();
        if request.live {
            let (generator, judge) = app.inner.engine.live_pair()?;
            policy.generator_backend = generator;
            policy.judge_backend = judge;
        }
        policy.parallelism = policy.parallelism.min(app.inner.parallelism);
        let seed = request.seed.unwrap_or_else(rand::random);
        let id = format!("s-{}", uuid::Uuid::new_v4().simple());
        let session = Session::create(&request.problem_statement, policy, app.inner.registry.clone(), seed, Some(id))?;
        info!(session = %session.state().session_id, status = %session.state().status, "session created");
        app.insert(session)
    })
    .await?;
    let location = format!("/sessions/{}", state.session_id);
    Ok((StatusCode::CREATED, [(header::LOCATION, location)], Json(document(&state))).into_response())
}

async fn list_sessions(State(app): State<AppState>) -> ApiResult<Json<Value>> {
    let ids = blocking(move || Ok(app.inner.store.list()?)).await?;
    Ok(Json(json!({ "sessions": ids })))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = blocking(move || app.slot(&id)).await?;
    Ok(Json(document(&slot.snapshot())))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRequest {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    approve: bool,
}

async fn spec(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let request: SpecRequest = parse_body(&body)?;
    let state = blocking(move || {
        let (_, state) = match (request.content, request.approve) {
            (Some(content), false) => app.mutate(&id, |s| s.edit_specification(&content).map(|_| ()))?,
            (None, true) => app.mutate(&id, |s| s.approve_specification())?,
            _ => {
                return Err(ErrorEnvelope::new("validation", "send either content or approve: true").into());
            }
        };
        Ok(state)
    })
    .await?;
    Ok(Json(document(&state)))
}

async fn start_iteration(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let lookup = app.clone();
    let lookup_id = id.clone();
    let snapshot = blocking(move || Ok(lookup.slot(&lookup_id)?.snapshot())).await?;
    if snapshot.status != SessionStatus::Generating {
        return Err(SessionError::WrongStatus {
            action: "run an iteration".into(),
            status: snapshot.status,
        }
        .into());
    }
    if snapshot.completed_iterations() >= snapshot.policy.max_iterations {
        return Err(SessionError::IterationLimit(snapshot.policy.max_iterations).into());
    }
    let job = Job {
        job_id: format!("j-{}", uuid::Uuid::new_v4().simple()),
        session_id: id.clone(),
        status: JobStatus::Running,
        iteration: None,
        error: None,
    };
    app.set_job(job.clone());
    let worker = app.clone();
    let mut finished = job.clone();
    tokio::task::spawn_blocking(move || {
        match worker.mutate(&id, |s| s.run_iteration().map(|r| r.index)) {
            Ok((iteration, _)) => {
                finished.status = JobStatus::Succeeded;
                finished.iteration = Some(iteration);
            }
            Err(err) => {
                warn!(session = %id, error = %err.envelope, "iteration job failed");
                finished.status = JobStatus::Failed;
                finished.error = Some(err.envelope);
            }
        }
        worker.set_job(finished);
    });
    let location = format!("/sessions/{}/jobs/{}", job.session_id, job.job_id);
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, location)], Json(job)).into_response())
}

async fn get_job(State(app): State<AppState>, Path((id, job_id)): Path<(String, String)>) -> ApiResult<Json<Job>> {
    let jobs = app.inner.jobs.lock().unwrap_or_else(|e| e.into_inner());
    match jobs.get(&job_id) {
        Some(job) if job.session_id == id => Ok(Json(job.clone())),
        _ => Err(ErrorEnvelope::new("unknown-id", format!("no job {job_id} for session {id}")).into()),
    }
}

async fn feedback(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let message: Feedback = parse_body(&body)?;
    let state = blocking(move || Ok(app.mutate(&id, |s| s.apply_feedback(message))?.1)).await?;
    Ok(Json(document(&state)))
}

#[derive(Debug, Serialize)]
struct ArtifactView {
    artifact: Artifact,
    /// Content without mock bookkeeping lines.
    display_content: String,
    /// From the specification down to the artifact itself.
    lineage: Vec<Artifact>,
    refinements: Vec<ArtifactId>,
}

async fn get_artifact(
    State(app): State<AppState>,
    Path((id, artifact)): Path<(String, String)>,
) -> ApiResult<Json<ArtifactView>> {
    let artifact_id: ArtifactId = artifact
        .parse()
        .map_err(|_| ErrorEnvelope::new("validation", format!("{artifact:?} is not an artifact id")))?;
    let state = blocking(move || Ok(app.slot(&id)?.snapshot())).await?;
    let graph = &state.graph;
    let lineage = graph
        .lineage(artifact_id)
        .map_err(SessionError::from)?
        .into_iter()
        .map(|a| graph.get(a).cloned())
        .collect::<Result<Vec<_>, _>>()
        .map_err(SessionError::from)?;
    Ok(Json(ArtifactView {
        artifact: graph.get(artifact_id).map_err(SessionError::from)?.clone(),
        display_content: state.display_content(artifact_id)?.to_string(),
        lineage,
        refinements: graph.refinements_of(artifact_id).map_err(SessionError::from)?,
    }))
}

#[derive(Debug, Serialize)]
struct UtilityRow {
    id: ArtifactId,
    score: f64,
}

async fn get_utilities(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let state = blocking(move || Ok(app.slot(&id)?.snapshot())).await?;
    let body = match &state.utility_snapshot {
        Some(estimate) => {
            let rows: Vec<UtilityRow> = estimate.ranked().into_iter().map(|(id, score)| UtilityRow { id, score }).collect();
            json!({
                "session_id": state.session_id,
                "rows": rows,
                "regularization": estimate.regularization,
                "iterations_used": estimate.iterations_used,
                "converged": estimate.converged,
                "log_likelihood": estimate.log_likelihood,
            })
        }
        None => json!({ "session_id": state.session_id, "rows": [] }),
    };
    Ok(Json(body))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn not_found() -> ApiError {
    ErrorEnvelope::new("unknown-id", "no such endpoint").into()
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/spec", post(spec))
        .route("/sessions/{id}/iterations", post(start_iteration))
        .route("/sessions/{id}/jobs/{job_id}", get(get_job))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/artifacts/{artifact_id}", get(get_artifact))
        .route("/sessions/{id}/utilities", get(get_utilities))
        .fallback(not_found)
        .with_state(app)
}

/// Binds and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let config = config.resolve()?;
    let engine = match &config.backend_config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    let store = Store::open(&config.storage)?;
    let app = AppState::new(store, engine, config.parallelism);
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    info!(address = %listener.local_addr()?, storage = %config.storage.display(), "serving");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
