//! HTTP front end for the runtime's ingress routes.

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;

use crate::runtime::Runtime;

/// The route PagerDuty-style webhooks are posted to.
pub const INGEST_ROUTE: &str = "/api/v1/ingest/pagerduty";

/// Large enough that oversized bodies reach the runtime and get its 413.
const TRANSPORT_BODY_LIMIT: usize = 8 * 1024 * 1024;

pub fn router(runtime: Runtime) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .fallback(ingest)
        .layer(axum::extract::DefaultBodyLimit::max(TRANSPORT_BODY_LIMIT))
        .with_state(runtime)
}

async fn healthz() -> &'static str {
    "ok"
}

async fn ingest(
    State(runtime): State<Runtime>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let route = uri.path().to_owned();
    if !runtime.has_route(&route) {
        return (StatusCode::NOT_FOUND, Json(json!({"error": "unknown route"}))).into_response();
    }
    if method != Method::POST {
        return StatusCode::METHOD_NOT_ALLOWED.into_response();
    }
    let headers: BTreeMap<String, String> = headers
        .iter()
        .filter_map(|(k, v)| Some((k.as_str().to_owned(), v.to_str().ok()?.to_owned())))
        .collect();
    let rt = runtime.clone();
    let resp = match tokio::task::spawn_blocking(move || rt.http_ingress(&route, body, &headers)).await {
        Ok(r) => r,
        Err(_) => return StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    };
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    match resp.receipt_id {
        Some(id) => (status, Json(json!({ "receipt_id": id }))).into_response(),
        None => (status, Json(json!({ "error": resp.error }))).into_response(),
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    runtime: Runtime,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(runtime))
        .with_graceful_shutdown(shutdown)
        .await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}
