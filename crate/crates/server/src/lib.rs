//! HTTP and WebSocket front end for live sessions.
//!
//! One session runs at a time on a worker thread. Game state, phase
//! changes and channel quality are broadcast to every connected WebSocket
//! client; key and rating messages from any client are forwarded to the
//! running session, which stamps keys with its own clock.
//!
//! Routes:
//! - `GET /health`
//! - `GET /sessions` — summaries of every session since start-up
//! - `GET /sessions/{id}` — one session with its key log
//! - `POST /session/start` — body [`StartRequest`]; 409 while one is running
//! - `GET /ws` — WebSocket upgrade

mod session;

pub use session::{SessionInfo, SessionKind, SessionStatus, SessionSummary, SourceRequest, StartRequest};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde_json::json;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{mpsc, Arc, Mutex};
use tokio::sync::broadcast;

use bci_core::dataset::{Key, KeyAction};
use bci_core::engine::ClientMsg;
use bci_core::models::Classifier;

/// Messages buffered per slow WebSocket client before it starts skipping.
const BROADCAST_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Where finished session records are written (`<id>.bcis`).
    pub out_dir: Option<PathBuf>,
    /// Pre-trained model used by demo sessions and CNN transfer.
    pub model: Option<Arc<Classifier>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("a session is already running: {0}")]
    Busy(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("no such session: {0}")]
    NotFound(String),
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let status = match self {
            ServerError::Busy(_) => StatusCode::CONFLICT,
            ServerError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServerError::NotFound(_) => StatusCode::NOT_FOUND,
        };
        (status, Json(json!({"error": self.to_string()}))).into_response()
    }
}

/// Channels into the running session.
struct Active {
    id: String,
    keys: mpsc::Sender<(Key, KeyAction)>,
    rating: mpsc::Sender<u8>,
}

#[derive(Default)]
struct Registry {
    sessions: Vec<SessionInfo>,
    active: Option<Active>,
    counter: u64,
}

/// Shared server state.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    cfg: ServerConfig,
    registry: Mutex<Registry>,
    events: broadcast::Sender<String>,
}

impl AppState {
    pub fn new(cfg: ServerConfig) -> Self {
        let (events, _) = broadcast::channel(BROADCAST_CAPACITY);
        Self {
            inner: Arc::new(Inner {
                cfg,
                registry: Mutex::new(Registry::default()),
                events,
            }),
        }
    }

    fn registry(&self) -> std::sync::MutexGuard<'_, Registry> {
        // A panicking session thread never holds this lock, so poisoning
        // only follows a bug elsewhere; keep serving either way.
        self.inner.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn sessions(&self) -> Vec<SessionInfo> {
        self.registry().sessions.clone()
    }

    pub fn session(&self, id: &str) -> Option<SessionInfo> {
        self.registry().sessions.iter().find(|s| s.summary.session_id == id).cloned()
    }

    /// Validates `req` and starts it on a worker thread.
    pub fn start(&self, req: StartRequest) -> Result<SessionSummary, ServerError> {
        let mut reg = self.registry();
        if let Some(active) = &reg.active {
            return Err(ServerError::Busy(active.id.clone()));
        }
        reg.counter += 1;
        let id = req
            .session_id
            .clone()
            .unwrap_or_else(|| format!("s{:04}-{}", reg.counter, session::unix_ms()));
        if reg.sessions.iter().any(|s| s.summary.session_id == id) {
            return Err(ServerError::BadRequest(format!("session id {id} already used")));
        }
        let job = session::Job::prepare(&req, &id, &self.inner.cfg)?;
        let (key_tx, key_rx) = mpsc::channel();
        let (rating_tx, rating_rx) = mpsc::channel();
        let info = SessionInfo::running(&id, &req, job.seed());
        let summary = info.summary.clone();
        reg.sessions.push(info);
        reg.active = Some(Active {
            id: id.clone(),
            keys: key_tx,
            rating: rating_tx,
        });
        drop(reg);

        let state = self.clone();
        let events = self.inner.events.clone();
        let out_dir = self.inner.cfg.out_dir.clone();
        std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || {
                let finished = job.run(key_rx, rating_rx, events, out_dir.as_deref());
                let mut reg = state.registry();
                if let Some(s) = reg.sessions.iter_mut().find(|s| s.summary.session_id == id) {
                    s.finish(finished);
                }
                reg.active = None;
            })
            .map_err(|e| ServerError::BadRequest(format!("cannot start session thread: {e}")))?;
        Ok(summary)
    }

    /// Applies one client message to the running session, if any.
    fn dispatch(&self, msg: ClientMsg) {
        let reg = self.registry();
        let Some(active) = &reg.active else {
            log::debug!("client message with no running session: {msg:?}");
            return;
        };
        let sent = match msg {
            ClientMsg::Key { key, action, .. } => active.keys.send((key, action)).is_ok(),
            ClientMsg::Rating { value, .. } => active.rating.send(value).is_ok(),
        };
        if !sent {
            log::debug!("session {} no longer accepts input", active.id);
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/session/start", post(start_session))
        .route("/ws", get(ws_upgrade))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends. Returns the bound
/// address through `on_bound` (useful with port 0).
pub async fn serve(
    addr: SocketAddr,
    cfg: ServerConfig,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(AppState::new(cfg))).await
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let active = state.registry().active.as_ref().map(|a| a.id.clone());
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION"), "active_session": active}))
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<SessionSummary>> {
    Json(state.sessions().into_iter().map(|s| s.summary).collect())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ServerError> {
    state.session(&id).map(Json).ok_or(ServerError::NotFound(id))
}

async fn start_session(
    State(state): State<AppState>,
    Json(req): Json<StartRequest>,
) -> Result<(StatusCode, Json<SessionSummary>), ServerError> {
    state.start(req).map(|s| (StatusCode::CREATED, Json(s)))
}

async fn ws_upgrade(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| client_loop(state, socket))
}

async fn client_loop(state: AppState, socket: WebSocket) {
    let mut events = state.inner.events.subscribe();
    let (mut sink, mut stream) = socket.split();
    let forward = tokio::spawn(async move {
        loop {
            match events.recv().await {
                Ok(text) => {
                    if sink.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("websocket client skipped {n} messages"),
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => match ClientMsg::parse(&text) {
                Ok(m) => state.dispatch(m),
                Err(e) => log::warn!("rejected client message: {e}"),
            },
            Message::Close(_) => break,
            _ => {}
        }
    }
    forward.abort();
}
