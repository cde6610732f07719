//! Axum routes.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, HeaderMap};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};
use tokio_stream::wrappers::ReceiverStream;
use tokio_stream::StreamExt;

use memeface_core::imaging::encode_png;

use crate::checkpoints::CheckpointInfo;
use crate::error::ServiceError;
use crate::generate::{GenerateRequest, Service};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub loaded_vocab: bool,
    pub n_checkpoints: usize,
}

/// Cheap status probe; never evaluates a model.
pub fn health(service: &Service) -> Health {
    let checkpoints = service.checkpoints();
    let n_checkpoints = checkpoints.as_ref().map(Vec::len).unwrap_or(0);
    let loaded_vocab = service.vocab.is_some();
    let ok = loaded_vocab && checkpoints.is_ok() && !service.templates.is_empty();
    Health { status: if ok { "ok" } else { "degraded" }.into(), loaded_vocab, n_checkpoints }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateView {
    pub id: usize,
    pub member_count: usize,
    pub thumbnail_b64: String,
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(get_health))
        .route("/checkpoints", get(get_checkpoints))
        .route("/templates", get(get_templates))
        .route("/generate", post(post_generate))
        .with_state(service)
}

/// Serve the router on `listener` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

async fn get_health(State(s): State<Arc<Service>>) -> Json<Health> {
    Json(health(&s))
}

async fn get_checkpoints(State(s): State<Arc<Service>>) -> Result<Json<Vec<CheckpointInfo>>, ServiceError> {
    Ok(Json(s.checkpoints()?))
}

async fn get_templates(State(s): State<Arc<Service>>) -> Result<Json<Vec<TemplateView>>, ServiceError> {
    s.templates
        .values()
        .map(|t| {
            let png = encode_png(&t.image)?;
            Ok(TemplateView { id: t.id, member_count: t.member_count, thumbnail_b64: STANDARD.encode(png) })
        })
        .collect::<Result<Vec<_>, ServiceError>>()
        .map(Json)
}

fn wants_stream(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/event-stream"))
}

async fn post_generate(State(s): State<Arc<Service>>, headers: HeaderMap, Json(req): Json<GenerateRequest>) -> Response {
    if wants_stream(&headers) {
        return match stream_generate(s, req).await {
            Ok(stream) => Sse::new(stream).keep_alive(KeepAlive::default()).into_response(),
            Err(e) => e.into_response(),
        };
    }
    let joined = tokio::task::spawn_blocking(move || s.handle_generate(&req)).await;
    match joined {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ServiceError::Internal(format!("generation task failed: {e}")).into_response(),
    }
}

/// Events: `log` lines, one `frame` per checkpoint, then `done` with the
/// resolution and full log, or `error` if a checkpoint fails mid-stream.
async fn stream_generate(
    s: Arc<Service>,
    req: GenerateRequest,
) -> Result<impl Stream<Item = Result<Event, Infallible>>, ServiceError> {
    let (ready_tx, ready_rx) = oneshot::channel::<Result<(), ServiceError>>();
    let (tx, rx) = mpsc::channel::<Event>(4);
    tokio::task::spawn_blocking(move || {
        let p = match s.prepare(&req) {
            Ok(p) => p,
            Err(e) => {
                let _ = ready_tx.send(Err(e));
                return;
            }
        };
        let _ = ready_tx.send(Ok(()));
        let mut log = p.header();
        for line in &log {
            if tx.blocking_send(Event::default().event("log").data(line.clone())).is_err() {
                return;
            }
        }
        let mut resolution = 0;
        for info in &p.checkpoints {
            match s.frame(&p, info) {
                Ok((frame, res, line)) => {
                    resolution = res;
                    let json = serde_json::to_string(&frame).expect("frame serializes");
                    if tx.blocking_send(Event::default().event("frame").data(json)).is_err()
                        || tx.blocking_send(Event::default().event("log").data(line.clone())).is_err()
                    {
                        return;
                    }
                    log.push(line);
                }
                Err(e) => {
                    let _ = tx.blocking_send(Event::default().event("error").data(e.to_string()));
                    return;
                }
            }
        }
        let done = serde_json::json!({ "resolution": resolution, "log": log });
        let _ = tx.blocking_send(Event::default().event("done").data(done.to_string()));
    });
    match ready_rx.await {
        Ok(Ok(())) => Ok(ReceiverStream::new(rx).map(Ok)),
        Ok(Err(e)) => Err(e),
        Err(_) => Err(ServiceError::Internal("generation task ended early".into())),
    }
}
