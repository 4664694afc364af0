//! REST and WebSocket surface over the engine.
//!
//! Engine calls are synchronous and may block on model backends, so every
//! handler runs them on the blocking pool.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::rejection::WebSocketUpgradeRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;
use zagii_core::copilot::CopilotError;
use zagii_core::engine::{Engine, EngineError};
use zagii_core::events::{BusEvent, EventPayload, NpcAction, Topic};
use zagii_core::game_schema::{serialize_game, SchemaError};

pub type Shared = Arc<Engine>;

pub fn router(engine: Shared) -> Router {
    Router::new()
        .route("/games", post(create_game).get(list_games))
        .route("/games/{id}", get(get_game))
        .route("/copilot/jobs", post(create_job))
        .route("/copilot/jobs/{id}", get(get_job))
        .route("/copilot/jobs/{id}/resume", post(resume_job))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/rounds", post(run_round))
        .route("/sessions/{id}/state", get(session_state))
        .route("/sessions/{id}", axum::routing::delete(end_session))
        .route("/sessions/{id}/stream", get(stream))
        .route("/analytics/summary", get(analytics))
        .with_state(engine)
}

// ---------------------------------------------------------------------------
// Errors

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), details: None }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            EngineError::UnknownGame(_) | EngineError::UnknownSession(_) | EngineError::UnknownJob(_) => (StatusCode::NOT_FOUND, "not_found"),
            EngineError::SessionClosed(_) => (StatusCode::CONFLICT, "session_closed"),
            EngineError::Busy(_) => (StatusCode::CONFLICT, "busy"),
            EngineError::EmptyUtterance => (StatusCode::BAD_REQUEST, "empty_utterance"),
            EngineError::InvalidGame(_) | EngineError::Schema(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_game"),
            EngineError::Backend(_) => (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable"),
            EngineError::Copilot(CopilotError::InvalidSeed) => (StatusCode::BAD_REQUEST, "invalid_seed"),
            EngineError::Copilot(CopilotError::NotWaiting(_)) => (StatusCode::CONFLICT, "job_not_waiting"),
            EngineError::Copilot(CopilotError::BackendUnavailable(_)) => (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable"),
            EngineError::Copilot(_) => (StatusCode::UNPROCESSABLE_ENTITY, "copilot_failed"),
            EngineError::Store(_) | EngineError::Bus(_) | EngineError::Persist(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let details = match e {
            EngineError::InvalidGame(report) | EngineError::Schema(SchemaError::Validation(report)) => {
                Some(serde_json::to_value(report.issues).expect("issues serialize"))
            }
            _ => None,
        };
        Self { status, code, message, details }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let retryable = self.status == StatusCode::SERVICE_UNAVAILABLE || self.code == "busy";
        let mut body = json!({ "error": self.code, "message": self.message, "retryable": retryable });
        if let Some(details) = self.details {
            body["issues"] = details;
        }
        (self.status, Json(body)).into_response()
    }
}

async fn blocking<T, F>(engine: &Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    let engine = engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

// ---------------------------------------------------------------------------
// Games

async fn create_game(State(engine): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let (game_id, report) = blocking(&engine, move |e| e.register_game_document(&body)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "game_id": game_id, "warnings": report.issues })))
        .into_response())
}

async fn list_games(State(engine): State<Shared>) -> Json<serde_json::Value> {
    Json(json!(engine.games()))
}

async fn get_game(State(engine): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let def = engine.game(&id).ok_or_else(|| ApiError::from(EngineError::UnknownGame(id)))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], serialize_game(&def)).into_response())
}

// ---------------------------------------------------------------------------
// Copilot

#[derive(Debug, Deserialize)]
struct JobRequest {
    seed: String,
    #[serde(default)]
    template_game_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ResumeRequest {
    output: String,
}

async fn create_job(State(engine): State<Shared>, Json(req): Json<JobRequest>) -> Result<Response, ApiError> {
    let job = blocking(&engine, move |e| e.create_job(&req.seed, req.template_game_id.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(job)).into_response())
}

async fn get_job(State(engine): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(engine.job(&id)?).into_response())
}

async fn resume_job(State(engine): State<Shared>, Path(id): Path<String>, Json(req): Json<ResumeRequest>) -> Result<Response, ApiError> {
    let job = blocking(&engine, move |e| e.resume_job(&id, &req.output)).await?;
    Ok(Json(job).into_response())
}

// ---------------------------------------------------------------------------
// Sessions

#[derive(Debug, Deserialize)]
struct SessionRequest {
    game_id: String,
}

#[derive(Debug, Deserialize)]
struct RoundRequest {
    utterance: String,
}

async fn create_session(State(engine): State<Shared>, Json(req): Json<SessionRequest>) -> Result<Response, ApiError> {
    let view = blocking(&engine, move |e| e.start_session(&req.game_id)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn run_round(State(engine): State<Shared>, Path(id): Path<String>, Json(req): Json<RoundRequest>) -> Result<Response, ApiError> {
    let result = blocking(&engine, move |e| e.run_round(&id, &req.utterance)).await?;
    Ok(Json(result).into_response())
}

async fn session_state(State(engine): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(engine.session_state(&id)?).into_response())
}

async fn end_session(State(engine): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let view = blocking(&engine, move |e| e.end_session(&id)).await?;
    Ok(Json(view).into_response())
}

// ---------------------------------------------------------------------------
// Analytics

#[derive(Debug, Deserialize)]
struct AnalyticsQuery {
    top_k: Option<usize>,
    outlier_threshold: Option<u64>,
}

async fn analytics(State(engine): State<Shared>, Query(q): Query<AnalyticsQuery>) -> Result<Response, ApiError> {
    let summary = blocking(&engine, move |e| e.analytics(q.top_k, q.outlier_threshold)).await?;
    Ok(Json(summary).into_response())
}

// ---------------------------------------------------------------------------
// Event stream

#[derive(Debug, Deserialize)]
struct StreamQuery {
    /// First seq to deliver; earlier events are skipped. Defaults to 1.
    from_seq: Option<u64>,
    /// Comma-separated topic names.
    topics: Option<String>,
    /// When set, dialogue text is also sent word by word at this cadence
    /// before its event.
    chunk_ms: Option<u64>,
}

/// Non-event frame sent in chunked mode.
#[derive(Debug, Serialize, Deserialize)]
pub struct DialogueChunk {
    pub seq: u64,
    pub text: String,
}

fn parse_topics(raw: &str) -> Result<Vec<Topic>, ApiError> {
    raw.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            serde_json::from_value(json!(t.trim()))
                .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad_topic", format!("unknown topic '{t}'")))
        })
        .collect()
}

async fn stream(
    State(engine): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
    ws: Result<WebSocketUpgrade, WebSocketUpgradeRejection>,
) -> Result<Response, ApiError> {
    let topics = q.topics.as_deref().map(parse_topics).transpose()?;
    let ws = ws.map_err(|r| ApiError::new(r.status(), "upgrade_required", r.body_text()))?;
    let subscription = engine
        .bus()
        .replay_from(&id, q.from_seq.unwrap_or(1), topics.as_deref())
        .map_err(|_| ApiError::from(EngineError::UnknownSession(id.clone())))?;
    let bus = engine.bus().clone();
    let (tx, rx) = mpsc::channel::<BusEvent>(256);
    tokio::task::spawn_blocking(move || {
        let mut sub = subscription;
        loop {
            match sub.recv_timeout(Duration::from_millis(100)) {
                Some(event) => {
                    if tx.blocking_send(event).is_err() {
                        return;
                    }
                }
                None if tx.is_closed() => return,
                None if bus.is_closed(&id).unwrap_or(true) => {
                    for event in sub.drain() {
                        if tx.blocking_send(event).is_err() {
                            return;
                        }
                    }
                    return;
                }
                None => {}
            }
        }
    });
    Ok(ws.on_upgrade(move |socket| forward(socket, rx, q.chunk_ms.filter(|ms| *ms > 0))))
}

async fn forward(mut socket: WebSocket, mut rx: mpsc::Receiver<BusEvent>, chunk_ms: Option<u64>) {
    loop {
        let event = tokio::select! {
            event = rx.recv() => match event {
                Some(event) => event,
                None => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => return,
                Some(Ok(_)) => continue,
            },
        };
        if let (Some(ms), EventPayload::NpcAction(NpcAction::Dialogue { text, .. })) = (chunk_ms, &event.payload) {
            for word in text.split_whitespace() {
                let frame = json!({ "chunk": DialogueChunk { seq: event.seq, text: word.to_string() } });
                if socket.send(Message::Text(frame.to_string().into())).await.is_err() {
                    return;
                }
                tokio::time::sleep(Duration::from_millis(ms)).await;
            }
        }
        if socket.send(Message::Text(event.to_line().into())).await.is_err() {
            return;
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}
