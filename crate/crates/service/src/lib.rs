//! HTTP session service.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/health` | |
//! | POST | `/sessions` | multipart: `target`, `mask`, `source` (PNG), optional `config` (JSON) |
//! | GET | `/sessions/{id}` | |
//! | GET | `/sessions/{id}/artifacts/{name}` | |
//! | POST | `/sessions/{id}/mask` | PNG |
//! | POST | `/sessions/{id}/fuse` | `{"toggles": [bool], "tau"?: f64, "gamma"?: f64}` |
//! | DELETE | `/sessions/{id}` | |

pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

pub use error::{ApiError, Result};
pub use store::{ComputeMode, FuseRequest, FuseResponse, Manifest, SessionState, Store};

/// Environment variable that overrides the default store directory.
pub const STORE_ENV: &str = "REFILL_STORE";
pub const DEFAULT_STORE: &str = "refill-store";

const MAX_UPLOAD: usize = 256 * 1024 * 1024;

/// Store directory: the explicit argument, else `REFILL_STORE`, else
/// [`DEFAULT_STORE`].
pub fn store_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(STORE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/artifacts/{name}", get(get_artifact))
        .route("/sessions/{id}/mask", post(replace_mask))
        .route("/sessions/{id}/fuse", post(fuse))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(store)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, store: Arc<Store>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(store)).await
}

fn require_content_type(headers: &HeaderMap, expected: &'static str) -> Result<()> {
    let ok = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.split(';').next())
        .is_some_and(|v| v.trim().eq_ignore_ascii_case(expected));
    if ok {
        Ok(())
    } else {
        Err(ApiError::UnsupportedMediaType { expected })
    }
}

async fn health() -> &'static str {
    "ok"
}

async fn create_session(State(store): State<Arc<Store>>, headers: HeaderMap, multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>) -> Result<Response> {
    require_content_type(&headers, "multipart/form-data")?;
    let mut multipart = multipart.map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let (mut target, mut mask, mut source, mut config) = (None, None, None, None);
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::Unprocessable(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| ApiError::Unprocessable(e.to_string()))?;
        match name.as_str() {
            "target" => target = Some(data),
            "mask" => mask = Some(data),
            "source" => source = Some(data),
            "config" => config = Some(data),
            other => return Err(ApiError::Unprocessable(format!("unexpected field {other:?}"))),
        }
    }
    let missing = |n: &str| ApiError::Unprocessable(format!("missing field {n:?}"));
    let target = target.ok_or_else(|| missing("target"))?;
    let mask = mask.ok_or_else(|| missing("mask"))?;
    let source = source.ok_or_else(|| missing("source"))?;
    let id = store.create(&target, &mask, &source, config.as_deref())?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "id": id }))).into_response())
}

async fn get_session(State(store): State<Arc<Store>>, Path(id): Path<String>) -> Result<Json<Manifest>> {
    Ok(Json(store.get(&id)?.manifest()))
}

async fn get_artifact(State(store): State<Arc<Store>>, Path((id, name)): Path<(String, String)>) -> Result<Response> {
    let session = store.get(&id)?;
    let (path, mime) = session.artifact_path(&name)?;
    let bytes = std::fs::read(path).map_err(|_| ApiError::UnknownArtifact(name))?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn replace_mask(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response> {
    store.get(&id)?;
    require_content_type(&headers, "image/png")?;
    let manifest = store.replace_mask(&id, &body).await?;
    Ok((StatusCode::ACCEPTED, Json(manifest)).into_response())
}

async fn fuse(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<FuseResponse>> {
    store.get(&id)?;
    require_content_type(&headers, "application/json")?;
    let req: FuseRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::Unprocessable(format!("fuse body: {e}")))?;
    Ok(Json(store.fuse(&id, &req).await?))
}

async fn delete_session(State(store): State<Arc<Store>>, Path(id): Path<String>) -> Result<StatusCode> {
    store.delete(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}
