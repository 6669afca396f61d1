use std::convert::Infallible;
use std::sync::Arc;

use aquafarm_core::ml::arbitrate::MlMode;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::driver::{CommandAck, CommandError, Handle, StateView};
use crate::event::EventKind;
use crate::log::{EventReader, HistoryPage, HistoryQuery};
use crate::overrides::OverrideRequest;

pub const DEFAULT_HISTORY_LIMIT: usize = 1000;

#[derive(Clone)]
pub struct AppState {
    pub handle: Handle,
    pub reader: EventReader,
    /// Body of `GET /api/models`.
    pub models: Arc<Value>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/history", get(history))
        .route("/api/stream", get(stream))
        .route("/api/models", get(models))
        .route("/api/override", post(post_override))
        .route("/api/setpoints", post(post_setpoints))
        .route("/api/alerts/{id}/ack", post(ack))
        .route("/api/mode", post(post_mode))
        .with_state(state)
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        let status = match &e {
            CommandError::Invalid(_) => StatusCode::BAD_REQUEST,
            CommandError::UnknownAlert(_) => StatusCode::NOT_FOUND,
            CommandError::Conflict(_) => StatusCode::CONFLICT,
            CommandError::Stopped => StatusCode::SERVICE_UNAVAILABLE,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(bad_request)
}

async fn get_state(State(s): State<AppState>) -> Result<Json<StateView>, ApiError> {
    Ok(Json(s.handle.state().await?))
}

#[derive(Debug, Deserialize)]
struct HistoryParams {
    from: Option<f64>,
    to: Option<f64>,
    /// Comma-separated event kinds.
    kinds: Option<String>,
    limit: Option<usize>,
    after_seq: Option<u64>,
}

async fn history(State(s): State<AppState>, Query(p): Query<HistoryParams>) -> Result<Json<HistoryPage>, ApiError> {
    let kinds = match p.kinds.as_deref().filter(|k| !k.is_empty()) {
        Some(k) => Some(k.split(',').map(|x| x.trim().parse::<EventKind>()).collect::<Result<Vec<_>, _>>().map_err(bad_request)?),
        None => None,
    };
    let q = HistoryQuery {
        from: p.from,
        to: p.to,
        kinds,
        limit: p.limit.unwrap_or(DEFAULT_HISTORY_LIMIT),
        after_seq: p.after_seq,
    };
    Ok(Json(s.reader.query(&q).map_err(bad_request)?))
}

#[derive(Debug, Deserialize)]
struct StreamParams {
    since_seq: Option<u64>,
}

async fn stream(
    State(s): State<AppState>,
    Query(p): Query<StreamParams>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let events = s
        .reader
        .subscribe(p.since_seq.unwrap_or(0))
        .map(|r| Ok(Event::default().data(serde_json::to_string(&r).expect("event serializes"))));
    Sse::new(events).keep_alive(KeepAlive::default())
}

async fn models(State(s): State<AppState>) -> Json<Value> {
    Json((*s.models).clone())
}

async fn post_override(State(s): State<AppState>, body: Bytes) -> Result<Json<CommandAck>, ApiError> {
    let req: OverrideRequest = parse(&body)?;
    Ok(Json(s.handle.apply_override(req).await?))
}

async fn post_setpoints(State(s): State<AppState>, body: Bytes) -> Result<Json<CommandAck>, ApiError> {
    Ok(Json(s.handle.setpoints(parse(&body)?).await?))
}

async fn ack(State(s): State<AppState>, Path(id): Path<u64>) -> Result<Json<CommandAck>, ApiError> {
    Ok(Json(s.handle.acknowledge(id).await?))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ModeBody {
    Bare(MlMode),
    Wrapped { mode: MlMode },
}

async fn post_mode(State(s): State<AppState>, body: Bytes) -> Result<Json<CommandAck>, ApiError> {
    let mode = match parse::<ModeBody>(&body)? {
        ModeBody::Bare(m) | ModeBody::Wrapped { mode: m } => m,
    };
    Ok(Json(s.handle.set_mode(mode).await?))
}
