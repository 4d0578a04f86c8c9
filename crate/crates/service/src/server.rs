//! HTTP session lifecycle and the WebSocket endpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};

use bip_core::biploop::TrainConfig;
use bip_core::metrics::ChrfConfig;
use bip_core::Checkpoint;

use crate::session::{self, Command, SessionHandle, SessionSetup, SessionStatus};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Checkpoint id -> checkpoint directory.
    pub checkpoints: BTreeMap<String, PathBuf>,
    /// Tokenized source sentences that stream specs index into.
    pub corpus: Vec<Vec<String>>,
    /// Optional references, one per corpus line; enables simulated sessions.
    pub references: Option<Vec<Vec<String>>>,
    pub train: TrainConfig,
    pub chrf: ChrfConfig,
    pub critic_seed: u64,
    /// Inactivity limit while a request is outstanding. Zero disables it.
    pub timeout: Duration,
    /// Per-session episodes.jsonl and final checkpoint go to `output_dir/<session id>`.
    pub output_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(checkpoints: BTreeMap<String, PathBuf>, corpus: Vec<Vec<String>>) -> Self {
        Self {
            checkpoints,
            corpus,
            references: None,
            train: TrainConfig::default(),
            chrf: ChrfConfig::default(),
            critic_seed: 0,
            timeout: DEFAULT_TIMEOUT,
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    /// Explicit source sentences; when absent the server corpus is used.
    pub sentences: Option<Vec<String>>,
    pub offset: usize,
    pub limit: Option<usize>,
    /// Rate with the reference-based oracle instead of a connected client.
    pub simulated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    pub checkpoint: String,
    #[serde(default)]
    pub stream: StreamSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartResponse {
    pub session_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown checkpoint {0:?}")]
    CheckpointNotFound(String),
    #[error("cannot load checkpoint {0:?}: {1}")]
    CheckpointInvalid(String, String),
    #[error("unknown session {0:?}")]
    SessionNotFound(String),
    #[error("{0}")]
    BadStream(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn code(&self) -> (StatusCode, &'static str) {
        match self {
            ApiError::CheckpointNotFound(_) => (StatusCode::NOT_FOUND, "checkpoint_not_found"),
            ApiError::CheckpointInvalid(..) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "checkpoint_invalid")
            }
            ApiError::SessionNotFound(_) => (StatusCode::NOT_FOUND, "session_not_found"),
            ApiError::BadStream(_) => (StatusCode::BAD_REQUEST, "bad_stream"),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.code();
        let body = serde_json::json!({"code": code, "message": self.to_string()});
        (status, Json(body)).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    next_session: AtomicU64,
    next_conn: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                sessions: Mutex::new(HashMap::new()),
                next_session: AtomicU64::new(1),
                next_conn: AtomicU64::new(1),
            }),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.inner
            .sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::SessionNotFound(id.to_string()))
    }

    /// Loads the checkpoint and launches a session.
    pub async fn start(&self, req: StartRequest) -> Result<String, ApiError> {
        let cfg = &self.inner.config;
        let dir = cfg
            .checkpoints
            .get(&req.checkpoint)
            .cloned()
            .ok_or_else(|| ApiError::CheckpointNotFound(req.checkpoint.clone()))?;
        let (sentences, references) = select_stream(cfg, &req.stream)?;
        let critic_seed = cfg.critic_seed;
        let name = req.checkpoint.clone();
        let loaded = tokio::task::spawn_blocking(move || {
            let ckpt = Checkpoint::load(&dir)?;
            let learner = ckpt.resume(critic_seed)?;
            Ok::<_, bip_core::Error>((ckpt.vocabs, learner))
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::CheckpointInvalid(name.clone(), e.to_string()))?;
        let (vocabs, learner) = loaded;

        let n = self.inner.next_session.fetch_add(1, Ordering::Relaxed);
        let id = format!("s{n}");
        let sources = sentences.iter().map(|s| vocabs.source.encode(s)).collect();
        let handle = session::spawn(SessionSetup {
            id: id.clone(),
            checkpoint_name: name,
            learner,
            vocabs,
            sources,
            references,
            train: cfg.train,
            chrf: cfg.chrf,
            timeout: cfg.timeout,
            output: cfg.output_dir.as_ref().map(|d| d.join(&id)),
        });
        self.inner
            .sessions
            .lock()
            .expect("sessions lock")
            .insert(id.clone(), handle);
        tracing::info!(event = "session_started", session = %id, checkpoint = %req.checkpoint);
        Ok(id)
    }

    pub fn status(&self, id: &str) -> Result<SessionStatus, ApiError> {
        Ok(self.session(id)?.status())
    }

    pub fn abort(&self, id: &str) -> Result<SessionStatus, ApiError> {
        let handle = self.session(id)?;
        handle.abort();
        Ok(handle.status())
    }
}

type Stream = (Vec<Vec<String>>, Option<Vec<Vec<String>>>);

fn select_stream(cfg: &ServiceConfig, spec: &StreamSpec) -> Result<Stream, ApiError> {
    let (pool, refs): (Vec<Vec<String>>, Option<&Vec<Vec<String>>>) = match &spec.sentences {
        Some(lines) => {
            if spec.simulated {
                return Err(ApiError::BadStream(
                    "simulated sessions need corpus inputs with references".into(),
                ));
            }
            (
                lines
                    .iter()
                    .map(|l| bip_core::corpus::tokenize(l))
                    .collect(),
                None,
            )
        }
        None => (cfg.corpus.clone(), cfg.references.as_ref()),
    };
    if spec.offset > pool.len() {
        return Err(ApiError::BadStream(format!(
            "offset {} beyond {} inputs",
            spec.offset,
            pool.len()
        )));
    }
    let end = spec
        .limit
        .map_or(pool.len(), |l| (spec.offset + l).min(pool.len()));
    let sentences = pool[spec.offset..end].to_vec();
    if sentences.is_empty() {
        return Err(ApiError::BadStream("stream selects no inputs".into()));
    }
    if sentences.iter().any(|s| s.is_empty()) {
        return Err(ApiError::BadStream(
            "stream contains an empty sentence".into(),
        ));
    }
    let references = if spec.simulated {
        let refs = refs.ok_or_else(|| ApiError::BadStream("server has no references".into()))?;
        Some(refs[spec.offset..end].to_vec())
    } else {
        None
    };
    Ok((sentences, references))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(start_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/ws", get(ws_session))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn start_session(
    State(state): State<AppState>,
    Json(req): Json<StartRequest>,
) -> Result<(StatusCode, Json<StartResponse>), ApiError> {
    let session_id = state.start(req).await?;
    Ok((StatusCode::CREATED, Json(StartResponse { session_id })))
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionStatus>, ApiError> {
    state.status(&id).map(Json)
}

async fn delete_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionStatus>, ApiError> {
    state.abort(&id).map(Json)
}

async fn ws_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let handle = state.session(&id)?;
    let conn = state.inner.next_conn.fetch_add(1, Ordering::Relaxed);
    Ok(ws.on_upgrade(move |socket| connection(socket, handle, conn)))
}

async fn connection(socket: WebSocket, handle: SessionHandle, conn: u64) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    let (accepted_tx, accepted_rx) = oneshot::channel();
    let attach = Command::Attach {
        conn,
        out: out_tx,
        accepted: accepted_tx,
    };
    if handle.commands.send(attach).is_err() {
        return;
    }
    match accepted_rx.await {
        Ok(Ok(())) => {}
        Ok(Err(msg)) => {
            let _ = sink.send(Message::Text(msg.to_json().into())).await;
            let _ = sink.send(Message::Close(None)).await;
            return;
        }
        Err(_) => return,
    }
    loop {
        tokio::select! {
            out = out_rx.recv() => match out {
                Some(m) => {
                    if sink.send(Message::Text(m.to_json().into())).await.is_err() {
                        break;
                    }
                }
                None => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            },
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let _ = handle.commands.send(Command::Client { conn, text: text.to_string() });
                }
                Some(Ok(Message::Binary(_))) => {
                    let _ = handle.commands.send(Command::Client { conn, text: String::new() });
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    let _ = handle.commands.send(Command::Detach { conn });
}
