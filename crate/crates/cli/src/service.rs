//! HTTP front end over a shared [`Engine`].
//!
//! Endpoints:
//! - `GET /health`
//! - `POST /sessions` with `{"manifestation_text": ...}`
//! - `POST /sessions/{id}/answers` with `{"question_id": ..., "affirmation": bool}`
//! - `GET /kg/differences?subcategory=<L2 id>`

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgdx_core::engine::{Answer, ConsultationSession, Engine, EngineError, SessionView};
use kgdx_core::matcher::{extract_differences, DifferenceSet};
use kgdx_core::{Level, NodeId};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

type SessionSlot = Arc<Mutex<ConsultationSession>>;

pub struct AppState {
    engine: Arc<Engine>,
    sessions: RwLock<HashMap<String, SessionSlot>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Arc<Self> {
        Arc::new(AppState {
            engine,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// All sessions, ordered by id. Sessions with a step in flight are
    /// waited for.
    pub async fn snapshot(&self) -> Vec<ConsultationSession> {
        let slots: Vec<SessionSlot> = self.sessions.read().await.values().cloned().collect();
        let mut out = Vec::with_capacity(slots.len());
        for s in slots {
            out.push(s.lock().await.clone());
        }
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }

    pub async fn restore(&self, sessions: Vec<ConsultationSession>) {
        let mut map = self.sessions.write().await;
        for s in sessions {
            map.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
        }
    }

    pub async fn save_snapshot(&self, path: &Path) -> std::io::Result<()> {
        let sessions = self.snapshot().await;
        let text = serde_json::to_string_pretty(&sessions).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub async fn load_snapshot(&self, path: &Path) -> std::io::Result<usize> {
        let sessions: Vec<ConsultationSession> =
            serde_json::from_str(&std::fs::read_to_string(path)?).map_err(std::io::Error::other)?;
        let n = sessions.len();
        self.restore(sessions).await;
        Ok(n)
    }
}

/// Error body: `{"error": ..., "retriable": bool}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub retriable: bool,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub retriable: bool,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            retriable: false,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            retriable: self.retriable,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::ZeroFeatures => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::Backend(_) | EngineError::Unparseable { .. } => StatusCode::BAD_GATEWAY,
            EngineError::UnknownQuestion(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            retriable: e.is_retriable(),
            message: e.to_string(),
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Health {
    pub status: String,
    pub kg_nodes: usize,
    pub index_size: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        kg_nodes: state.engine.kg().node_count(),
        index_size: state.engine.index().len(),
    })
}

#[derive(Deserialize)]
struct NewSession {
    manifestation_text: String,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let req: NewSession = parse_body(&body)?;
    if req.manifestation_text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "manifestation_text is empty"));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let engine = state.engine.clone();
    let sid = id.clone();
    let session = blocking(move || engine.start_session(&sid, &req.manifestation_text)).await??;
    let view = session.view();
    state.sessions.write().await.insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(view))
}

#[derive(Deserialize)]
struct AnswerRequest {
    question_id: String,
    affirmation: bool,
}

async fn answer(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let req: AnswerRequest = parse_body(&body)?;
    let slot = state
        .sessions
        .read()
        .await
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))?;
    let mut guard = slot
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "another step is in flight for this session"))?;
    let node_id: NodeId = guard
        .resolve_question(&req.question_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown question `{}`", req.question_id)))?;
    let engine = state.engine.clone();
    let view = blocking(move || {
        engine.consult_step(
            &mut guard,
            Some(Answer {
                node_id,
                affirmed: req.affirmation,
            }),
        )?;
        Ok::<_, EngineError>(guard.view())
    })
    .await??;
    Ok(Json(view))
}

#[derive(Deserialize)]
struct DifferencesQuery {
    subcategory: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DiseaseDifferences {
    pub disease: String,
    pub features: Vec<String>,
}

/// The difference set plus its labels grouped by disease.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DifferencesResponse {
    #[serde(flatten)]
    pub set: DifferenceSet,
    pub by_disease: Vec<DiseaseDifferences>,
}

async fn differences(
    State(state): State<Arc<AppState>>,
    q: Result<Query<DifferencesQuery>, QueryRejection>,
) -> Result<Json<DifferencesResponse>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let kg = state.engine.kg();
    kg.node_at(&q.subcategory, Level::L2)
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no subcategory `{}`", q.subcategory)))?;
    let set = extract_differences(kg, &q.subcategory)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let by_disease = set
        .grouped_labels(kg)
        .into_iter()
        .map(|(disease, features)| DiseaseDifferences { disease, features })
        .collect();
    Ok(Json(DifferencesResponse { set, by_disease }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/answers", post(answer))
        .route("/kg/differences", get(differences))
        .with_state(state)
}

/// Serves until ctrl-c, then writes the session snapshot if configured.
pub async fn serve(state: Arc<AppState>, listen: &str, snapshot: Option<PathBuf>) -> anyhow::Result<()> {
    if let Some(path) = snapshot.as_deref().filter(|p| p.exists()) {
        let n = state.load_snapshot(path).await?;
        tracing::info!(sessions = n, path = %path.display(), "restored session snapshot");
    }
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(address = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if let Some(path) = snapshot {
        state.save_snapshot(&path).await?;
        tracing::info!(path = %path.display(), "saved session snapshot");
    }
    Ok(())
}
