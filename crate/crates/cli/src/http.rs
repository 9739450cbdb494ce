//! JSON-over-HTTP wrapper around [`DialogueService`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{rejection::JsonRejection, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use fsdm::service::{DialogueService, ServiceError, TurnRequest};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResetRequest {
    #[serde(default)]
    session_id: Option<String>,
}

#[derive(Debug, Serialize)]
struct ResetResponse {
    session_id: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

pub fn router(service: Arc<DialogueService>) -> Router {
    Router::new()
        .route("/v1/turn", post(turn))
        .route("/v1/session/reset", post(reset))
        .route("/v1/health", get(health))
        .route("/v1/schema", get(schema))
        .layer(CorsLayer::permissive())
        .with_state(service)
}

async fn turn(State(svc): State<Arc<DialogueService>>, body: Result<Json<TurnRequest>, JsonRejection>) -> Response {
    let Json(request) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match tokio::task::spawn_blocking(move || svc.serve_turn(&request)).await {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(ServiceError::BadRequest(m))) => error(StatusCode::BAD_REQUEST, m),
        Ok(Err(e)) => {
            log::error!("turn failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn reset(State(svc): State<Arc<DialogueService>>, body: Bytes) -> Response {
    let req: ResetRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ResetRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
        }
    };
    Json(ResetResponse { session_id: svc.reset(req.session_id.as_deref()) }).into_response()
}

async fn health(State(svc): State<Arc<DialogueService>>) -> Response {
    Json(json!({
        "status": "ok",
        "sessions": svc.sessions.len(),
        "parameters": svc.model.num_parameters(),
        "kb_records": svc.kb.num_records(),
    }))
    .into_response()
}

async fn schema(State(svc): State<Arc<DialogueService>>) -> Response {
    Json(&svc.model.schema).into_response()
}
