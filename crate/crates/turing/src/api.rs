use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use embryogen_core::data::Stage;
use embryogen_core::turing::{AnnotationFilter, TrueSource, Verdict};
use serde::Deserialize;
use serde_json::json;

use crate::error::ServiceError;
use crate::store::Store;

/// Shared handle; every request takes the lock, so writes are serialised
/// and reports see a consistent snapshot.
#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<Store>>,
}

impl AppState {
    pub fn new(store: Store) -> Self {
        AppState {
            store: Arc::new(Mutex::new(store)),
        }
    }

    pub fn store(&self) -> MutexGuard<'_, Store> {
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::BAD_REQUEST,
            ServiceError::Storage(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.kind(), "message": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

fn bad_json(e: JsonRejection) -> ServiceError {
    ServiceError::Validation(e.body_text())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    rater_id: String,
    pool_id: String,
    #[serde(default)]
    seed: Option<u64>,
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<NewSession>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body.map_err(bad_json)?;
    let info = state.store().create_session(&req.rater_id, &req.pool_id, req.seed)?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(state.store().session(&id)?))
}

async fn next_image(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(state.store().next_image(&id)?))
}

async fn submit_verdict(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Verdict>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(verdict) = body.map_err(bad_json)?;
    let info = state.store().submit_verdict(&id, &verdict)?;
    Ok((StatusCode::CREATED, Json(info)))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    pool: String,
}

async fn turing_report(
    State(state): State<AppState>,
    query: Result<Query<ReportQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query.map_err(|e| ServiceError::Validation(e.body_text()))?;
    Ok(Json(state.store().report(&q.pool)?))
}

#[derive(Debug, Deserialize)]
struct AnnotationQuery {
    source: Option<String>,
    rater: Option<String>,
    stage: Option<String>,
}

async fn annotations(
    State(state): State<AppState>,
    query: Result<Query<AnnotationQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query.map_err(|e| ServiceError::Validation(e.body_text()))?;
    let filter = AnnotationFilter {
        source: q.source.as_deref().map(str::parse::<TrueSource>).transpose()?,
        rater_id: q.rater,
        stage: q.stage.as_deref().map(str::parse::<Stage>).transpose()?,
    };
    Ok(Json(state.store().annotations(&filter)?))
}

async fn image(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let png = state.store().image_png(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], png))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/next", get(next_image))
        .route("/sessions/{id}/verdicts", post(submit_verdict))
        .route("/reports/turing", get(turing_report))
        .route("/reports/annotations", get(annotations))
        .route("/images/{id}", get(image))
        .with_state(state)
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
