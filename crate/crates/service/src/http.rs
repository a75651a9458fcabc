use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use i2e_core::{DailyBar, FeatureRow};
use serde::{Deserialize, Serialize};

use crate::predict::PredictionRecord;
use crate::state::{AppState, FailedSymbol, RefreshError, RefreshSummary};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failed: Vec<FailedSymbol>,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self(status, ErrorBody { error: msg.into(), failed: Vec::new() })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/refresh", post(refresh))
        .route("/api/v1/rank", get(rank))
        .route("/api/v1/tickers/{symbol}", get(ticker))
        .route("/api/v1/health", get(health))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

async fn refresh(State(state): State<Arc<AppState>>) -> ApiResult<RefreshSummary> {
    let outcome = tokio::task::spawn_blocking(move || state.refresh())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match outcome {
        Ok(summary) => Ok(Json(summary)),
        Err(RefreshError::AllFailed(failed)) => Err(ApiError(
            StatusCode::BAD_GATEWAY,
            ErrorBody { error: "every symbol failed to refresh".into(), failed },
        )),
        Err(RefreshError::Internal(msg)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, msg)),
    }
}

#[derive(Debug, Deserialize)]
struct RankQuery {
    k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RankResponse {
    pub target_date: NaiveDate,
    pub top: Vec<PredictionRecord>,
    pub bottom: Vec<PredictionRecord>,
}

async fn rank(State(state): State<Arc<AppState>>, Query(q): Query<RankQuery>) -> ApiResult<RankResponse> {
    let snap = state.snapshot();
    let Some(preds) = snap.predictions.as_ref() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "refresh required"));
    };
    let k = q.k.unwrap_or(DEFAULT_K);
    let n = preds.records.len();
    if k == 0 || 2 * k > n {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("k must be between 1 and {} for a universe of {n} predictions", n / 2),
        ));
    }
    let (top, bottom) =
        preds.top_bottom(k).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(RankResponse {
        target_date: preds.target_date,
        top: top.into_iter().cloned().collect(),
        bottom: bottom.into_iter().cloned().collect(),
    }))
}

#[derive(Debug, Deserialize)]
struct RangeQuery {
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TickerResponse {
    pub bars: Vec<DailyBar>,
    pub indicators: Vec<FeatureRow>,
}

async fn ticker(
    State(state): State<Arc<AppState>>,
    Path(symbol): Path<String>,
    Query(q): Query<RangeQuery>,
) -> ApiResult<TickerResponse> {
    let snap = state.snapshot();
    let Some(data) = snap.tickers.get(&symbol) else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown symbol {symbol}")));
    };
    let inside = |d: NaiveDate| q.from.is_none_or(|f| d >= f) && q.to.is_none_or(|t| d <= t);
    Ok(Json(TickerResponse {
        bars: data.bars().iter().filter(|b| inside(b.date)).copied().collect(),
        indicators: data.features.iter().filter(|r| inside(r.date)).copied().collect(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_digests: BTreeMap<String, String>,
    pub data_as_of: Option<NaiveDate>,
}

async fn health(State(state): State<Arc<AppState>>) -> ApiResult<HealthResponse> {
    let model_digests =
        state.models().digests().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(HealthResponse { status: "ok".into(), model_digests, data_as_of: state.snapshot().data_as_of }))
}
