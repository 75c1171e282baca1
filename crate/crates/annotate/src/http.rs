//! HTTP+JSON routes over [`Service`].

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fluentcap::corpus::captions_to_string;
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::error::ServiceError;
use crate::eval::RatingSubmission;
use crate::grading::GradeSubmission;
use crate::store::Service;

pub const NDJSON: &str = "application/x-ndjson";

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Auth(_) => StatusCode::UNAUTHORIZED,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type Shared = Arc<Service>;
type ApiResult = Result<Response, ServiceError>;

/// Runs a writer operation off the async executor; the journal fsyncs.
async fn blocking<T: Send + 'static>(
    svc: &Shared,
    f: impl FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .expect("service task panicked")
}

fn json_or_empty<T: serde::Serialize>(v: Option<T>) -> Response {
    match v {
        Some(v) => Json(v).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

#[derive(Deserialize)]
struct AnnotatorQuery {
    annotator: String,
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: String,
}

async fn assignment(State(svc): State<Shared>, Query(q): Query<AnnotatorQuery>) -> ApiResult {
    let a = blocking(&svc, move |s| s.next_assignment(&q.annotator)).await?;
    Ok(json_or_empty(a))
}

async fn grade(State(svc): State<Shared>, Json(sub): Json<GradeSubmission>) -> ApiResult {
    let rec = blocking(&svc, move |s| s.submit_grade(&sub)).await?;
    Ok(Json(rec).into_response())
}

/// Consensus examples in the caption-file format, target then source line.
async fn export(State(svc): State<Shared>) -> ApiResult {
    let records: Vec<_> = svc
        .consensus_export()
        .iter()
        .flat_map(|ex| ex.to_records())
        .collect();
    let body = captions_to_string(&records)?;
    Ok(([(header::CONTENT_TYPE, NDJSON)], body).into_response())
}

async fn eval_item(State(svc): State<Shared>, Query(q): Query<RaterQuery>) -> ApiResult {
    let item = blocking(&svc, move |s| s.next_eval_item(&q.rater)).await?;
    Ok(json_or_empty(item))
}

async fn rating(State(svc): State<Shared>, Json(sub): Json<RatingSubmission>) -> ApiResult {
    let ack = blocking(&svc, move |s| s.submit_rating(&sub)).await?;
    Ok(Json(ack).into_response())
}

async fn report(State(svc): State<Shared>) -> ApiResult {
    Ok(Json(svc.report()).into_response())
}

async fn progress(State(svc): State<Shared>) -> ApiResult {
    Ok(Json(svc.progress()).into_response())
}

/// The API router; static files from `static_dir` are served for all other paths.
pub fn router(svc: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/assignment", get(assignment))
        .route("/api/grade", post(grade))
        .route("/api/export/consensus", get(export))
        .route("/api/eval/item", get(eval_item))
        .route("/api/eval/rating", post(rating))
        .route("/api/eval/report", get(report))
        .route("/api/progress", get(progress))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(svc: Shared, static_dir: Option<PathBuf>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(svc, static_dir)).await
}
