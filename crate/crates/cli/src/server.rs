//! HTTP ranking API over one immutable graph and checkpoint.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use phenokg_core::scalar::Scalar;
use phenokg_core::service::{PhenotypeMatch, RankRequest, RankResponse, Ranker, ServiceError, DEFAULT_SEARCH_LIMIT};
use serde::Deserialize;
use serde_json::json;

/// Precision-erased view of a [`Ranker`].
pub trait RankService: Send + Sync + 'static {
    fn rank(&self, request: &RankRequest) -> Result<RankResponse, ServiceError>;
    fn search(&self, query: &str, limit: usize) -> Vec<PhenotypeMatch>;
}

impl<T: Scalar + Send + Sync + 'static> RankService for Ranker<T> {
    fn rank(&self, request: &RankRequest) -> Result<RankResponse, ServiceError> {
        Ranker::rank(self, request)
    }

    fn search(&self, query: &str, limit: usize) -> Vec<PhenotypeMatch> {
        self.search_phenotypes(query, limit)
    }
}

pub type SharedService = Arc<dyn RankService>;

pub fn router(service: SharedService) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/phenotypes", get(phenotypes))
        .route("/rank", post(rank))
        .with_state(service)
}

fn error(status: StatusCode, body: serde_json::Value) -> Response {
    (status, Json(body)).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
struct SearchParams {
    #[serde(default)]
    q: String,
    limit: Option<usize>,
}

async fn phenotypes(State(service): State<SharedService>, params: Result<Query<SearchParams>, axum::extract::rejection::QueryRejection>) -> Response {
    let Ok(Query(params)) = params else {
        return error(StatusCode::BAD_REQUEST, json!({ "error": "invalid query parameters" }));
    };
    let limit = params.limit.unwrap_or(DEFAULT_SEARCH_LIMIT);
    if limit == 0 {
        return error(StatusCode::BAD_REQUEST, json!({ "error": "limit must be >= 1" }));
    }
    Json(json!({ "matches": service.search(&params.q, limit) })).into_response()
}

async fn rank(State(service): State<SharedService>, body: Bytes) -> Response {
    let request: RankRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, json!({ "error": format!("invalid request body: {e}") })),
    };
    let outcome = tokio::task::spawn_blocking(move || service.rank(&request)).await;
    match outcome {
        Ok(Ok(response)) => Json(response).into_response(),
        Ok(Err(e)) => {
            let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            if status.is_server_error() {
                log::error!("rank failed: {e}");
            }
            error(status, e.payload())
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": format!("ranking task failed: {e}") })),
    }
}

/// Serves until interrupted. The listener opens only after the model is loaded.
pub async fn serve(service: SharedService, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
