//! HTTP/JSON routes over the session registry.

use std::collections::BTreeMap;
use std::fs;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{ExperimentConfig, Phase};
use crate::error::{Error, Result};
use crate::service::render::render_sample;
use crate::service::session::{Session, SubmitError};

/// Session registry shared by all request handlers.
#[derive(Debug)]
pub struct AppState {
    /// Relative dataset paths in session configs resolve against this.
    pub base_dir: PathBuf,
    /// Where sessions persist `<id>.toml` and `<id>.ualc` on shutdown.
    pub checkpoint_dir: Option<PathBuf>,
    sessions: Mutex<BTreeMap<String, Arc<Session>>>,
    next_id: Mutex<u64>,
}

impl AppState {
    pub fn new(base_dir: PathBuf, checkpoint_dir: Option<PathBuf>) -> Self {
        Self {
            base_dir,
            checkpoint_dir,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: Mutex::new(1),
        }
    }

    fn checkpoint_path(&self, id: &str) -> Option<PathBuf> {
        self.checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("{id}.ualc")))
    }

    fn insert(&self, session: Arc<Session>) {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(session.id.clone(), session);
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    /// Starts a session; ids are `s1`, `s2`, ... in creation order.
    pub fn create_session(&self, config: ExperimentConfig) -> Result<Arc<Session>> {
        let id = {
            let mut next = self.next_id.lock().unwrap_or_else(|p| p.into_inner());
            let id = format!("s{next}");
            *next += 1;
            id
        };
        if let Some(dir) = &self.checkpoint_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("{id}.toml")), config.to_toml())?;
        }
        let session = Session::start(
            id.clone(),
            config,
            &self.base_dir,
            self.checkpoint_path(&id),
        )?;
        self.insert(session.clone());
        Ok(session)
    }

    /// Resumes every session checkpointed in `checkpoint_dir`.
    pub fn restore_sessions(&self) -> Result<Vec<String>> {
        let dir = self
            .checkpoint_dir
            .clone()
            .ok_or_else(|| Error::Config("restoring needs a checkpoint directory".into()))?;
        let mut restored = Vec::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ualc"))
            .collect();
        entries.sort();
        for path in entries {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad checkpoint name {}", path.display())))?
                .to_string();
            let config = ExperimentConfig::load(&dir.join(format!("{id}.toml")))?;
            let bytes = fs::read(&path)?;
            let session = Session::restore(
                id.clone(),
                config,
                &self.base_dir,
                &bytes,
                self.checkpoint_path(&id),
            )?;
            if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                let mut next = self.next_id.lock().unwrap_or_else(|p| p.into_inner());
                *next = (*next).max(n + 1);
            }
            self.insert(session);
            restored.push(id);
        }
        Ok(restored)
    }

    /// Stops every worker; each writes its checkpoint when configured.
    pub fn shutdown(&self) {
        let sessions: Vec<Arc<Session>> = self
            .sessions
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .cloned()
            .collect();
        for s in sessions {
            s.shutdown();
        }
    }
}

/// JSON error body `{"error": code, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn no_session(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "session_not_found",
            format!("no session {id}"),
        )
    }

    fn no_task(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "task_not_found",
            format!("no task {id}"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.code, "message": self.message})),
        )
            .into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/status", get(session_status))
        .route("/sessions/{id}/tasks", get(list_tasks))
        .route("/sessions/{id}/tasks/{tid}/label", post(submit_label))
        .route("/sessions/{id}/tasks/{tid}/image", get(task_image))
        .with_state(state)
}

fn find(state: &AppState, id: &str) -> ApiResult<Arc<Session>> {
    state.session(id).ok_or_else(|| ApiError::no_session(id))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let text = std::str::from_utf8(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", e.to_string()))?;
    let config = ExperimentConfig::from_json(text)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_config", e.to_string()))?;
    let session = tokio::task::spawn_blocking(move || state.create_session(config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| match e {
            Error::Io(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()),
            other => ApiError::new(StatusCode::BAD_REQUEST, "invalid_config", other.to_string()),
        })?;
    Ok((
        StatusCode::CREATED,
        Json(json!({"session_id": session.id, "seed": session.seed()})),
    ))
}

#[derive(Serialize)]
struct SessionSummary {
    session_id: String,
    phase: Phase,
    cycle_index: usize,
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    let rows = state
        .session_ids()
        .into_iter()
        .filter_map(|id| state.session(&id))
        .map(|s| {
            let st = s.status();
            SessionSummary {
                session_id: st.session_id,
                phase: st.phase,
                cycle_index: st.cycle_index,
            }
        })
        .collect();
    Json(rows)
}

async fn session_status(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(find(&state, &id)?.status()))
}

#[derive(Deserialize)]
struct TaskQuery {
    limit: Option<usize>,
}

#[derive(Serialize)]
struct TaskView {
    #[serde(flatten)]
    task: crate::service::session::AnnotationTask,
    image_url: String,
}

async fn list_tasks(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TaskQuery>,
) -> ApiResult<impl IntoResponse> {
    let session = find(&state, &id)?;
    let tasks: Vec<TaskView> = session
        .open_tasks(q.limit.unwrap_or(usize::MAX))
        .into_iter()
        .map(|task| TaskView {
            image_url: format!("/sessions/{id}/tasks/{}/image", task.task_id),
            task,
        })
        .collect();
    Ok(Json(tasks))
}

async fn submit_label(
    State(state): State<Arc<AppState>>,
    Path((id, tid)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let session = find(&state, &id)?;
    let value: serde_json::Value = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", e.to_string()))?;
    let class = value.get("class").ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_body",
            "body must be {\"class\": <index>}",
        )
    })?;
    let unprocessable =
        |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_class", m);
    if session.task(&tid).is_none() {
        return Err(ApiError::no_task(&tid));
    }
    let class = class.as_u64().ok_or_else(|| {
        unprocessable(format!("class must be a non-negative integer, got {class}"))
    })?;
    let class = usize::try_from(class).unwrap_or(usize::MAX);
    match session.submit(&tid, class) {
        Ok(task) => Ok(Json(task)),
        Err(SubmitError::UnknownTask) => Err(ApiError::no_task(&tid)),
        Err(SubmitError::AlreadyLabeled) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "already_labeled",
            format!("task {tid} is already labeled"),
        )),
        Err(SubmitError::ClassOutOfRange { class_count }) => Err(unprocessable(format!(
            "class {class} outside 0..{class_count}"
        ))),
    }
}

async fn task_image(
    State(state): State<Arc<AppState>>,
    Path((id, tid)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let session = find(&state, &id)?;
    let task = session.task(&tid).ok_or_else(|| ApiError::no_task(&tid))?;
    let row =
        session.ctx.positions(&[task.sample_id]).map_err(|e| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
        })?[0];
    let png = render_sample(&session.ctx.pool, row)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "render", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

/// Serves `state` on `listener` until `shutdown` resolves, then stops every
/// session worker.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    tokio::task::spawn_blocking(move || state.shutdown())
        .await
        .map_err(std::io::Error::other)
}

/// A server running on its own thread and runtime.
#[derive(Debug)]
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    /// Binds `addr` (port 0 picks a free port) and serves in the background.
    pub fn spawn(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let serve_state = state.clone();
        let thread = std::thread::spawn(move || {
            runtime.block_on(serve(listener, serve_state, async {
                let _ = stopped.await;
            }))
        });
        Ok(Self {
            addr,
            state,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests, shuts sessions down and joins the thread.
    pub fn stop(mut self) -> std::io::Result<()> {
        self.halt()
    }

    fn halt(&mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| std::io::Error::other("server thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.halt();
    }
}
