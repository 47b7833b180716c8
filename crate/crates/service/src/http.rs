//! JSON HTTP API over one immutable checkpoint.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use probsaint_core::checkpoint::Checkpoint;
use probsaint_core::features::{RawRow, SplitBounds};
use probsaint_core::inference::{ContextPolicy, GaussianPrediction, Predictor};
use probsaint_core::model::{InputLayout, ModelConfig};
use probsaint_core::train::TrainConfig;
use probsaint_core::RowError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, ServiceError};
use crate::workflow::{run_sweep, SweepRequest};

/// A loaded checkpoint ready to answer requests.
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub predictor: Predictor,
    pub model_version: String,
}

/// Shared handler state; `None` until a model is loaded.
#[derive(Clone, Default)]
pub struct AppState {
    pub model: Option<Arc<Loaded>>,
}

impl AppState {
    pub fn load(checkpoint: Checkpoint) -> Result<Self> {
        let predictor = checkpoint.predictor()?;
        let model_version = checkpoint.version_id()?;
        Ok(Self { model: Some(Arc::new(Loaded { checkpoint, predictor, model_version })) })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub rows: Vec<BTreeMap<String, Value>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predictions: Vec<GaussianPrediction>,
    pub model_version: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_version: String,
    pub config: ModelConfig,
    pub layout: InputLayout,
    pub num_parameters: usize,
    pub train_data_fingerprint: Option<String>,
    pub train_config: Option<TrainConfig>,
    pub split: Option<SplitBounds>,
    pub context_rows: usize,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    rows: Vec<usize>,
}

/// An error response with a JSON body.
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { error: error.into(), rows: Vec::new() } }
    }

    fn rows(errors: &[RowError]) -> Self {
        let mut rows: Vec<usize> = errors.iter().map(|e| e.row).collect();
        rows.sort_unstable();
        rows.dedup();
        let detail: Vec<String> = errors.iter().map(ToString::to_string).collect();
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody { error: format!("invalid rows: {}", detail.join("; ")), rows },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        use probsaint_core::Error as E;
        match e {
            ServiceError::Core(E::Row(r)) => Self::rows(&[r]),
            ServiceError::Core(E::AllRowsFailed(errs)) => Self::rows(&errs),
            ServiceError::Core(E::Forecast(msg)) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, msg),
            ServiceError::Core(E::Config(msg)) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, msg),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<probsaint_core::Error> for ApiError {
    fn from(e: probsaint_core::Error) -> Self {
        ServiceError::from(e).into()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/schema", get(schema))
        .route("/v1/model", get(model_info))
        .route("/v1/predict", post(predict))
        .route("/v1/sweep", post(sweep))
        .with_state(state)
}

pub async fn serve(state: AppState, port: u16) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
        .await
        .map_err(|e| ServiceError::Server(format!("cannot bind port {port}: {e}")))?;
    info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Server(e.to_string()))
}

fn loaded(state: &AppState) -> ApiResult<Arc<Loaded>> {
    state.model.clone().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

async fn healthz() -> &'static str {
    "ok"
}

async fn schema(State(state): State<AppState>) -> ApiResult<Response> {
    let m = loaded(&state)?;
    Ok(Json(&m.checkpoint.schema).into_response())
}

async fn model_info(State(state): State<AppState>) -> ApiResult<Json<ModelInfo>> {
    let m = loaded(&state)?;
    let c = &m.checkpoint;
    Ok(Json(ModelInfo {
        model_version: m.model_version.clone(),
        config: c.model.config.clone(),
        layout: c.model.layout.clone(),
        num_parameters: c.model.num_parameters(),
        train_data_fingerprint: c.train_fingerprint.clone(),
        train_config: c.train_config.clone(),
        split: c.split,
        context_rows: c.context_rows.len(),
    }))
}

/// Scores every request row; any row that cannot be encoded fails the
/// whole request.
pub fn predict_rows(loaded: &Loaded, rows: &[BTreeMap<String, Value>]) -> ApiResult<Vec<GaussianPrediction>> {
    let schema = &loaded.predictor.schema;
    let mut raw = Vec::with_capacity(rows.len());
    let mut errors = Vec::new();
    for (i, map) in rows.iter().enumerate() {
        match RawRow::from_json_map(schema, map, i) {
            Ok(r) => raw.push(r),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(ApiError::rows(&errors));
    }
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let (batch, errors) = loaded.predictor.encode(&raw)?;
    if !errors.is_empty() {
        return Err(ApiError::rows(&errors));
    }
    for (c, vocab) in &loaded.predictor.encoders.categorical {
        for (i, r) in raw.iter().enumerate() {
            if let Some(v) = r.get(*c).filter(|v| !vocab.contains(v)) {
                info!("row {i}: unseen value `{v}` in column `{}` maps to the unknown token", vocab.column);
            }
        }
    }
    Ok(loaded.predictor.predict_encoded(&batch, ContextPolicy::FixedContext)?)
}

async fn predict(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<PredictResponse>> {
    let m = loaded(&state)?;
    let req: PredictRequest = parse_json(&body)?;
    let model = Arc::clone(&m);
    let predictions = tokio::task::spawn_blocking(move || predict_rows(&model, &req.rows))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(PredictResponse { predictions, model_version: m.model_version.clone() }))
}

async fn sweep(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let m = loaded(&state)?;
    let req: SweepRequest = parse_json(&body)?;
    let model = Arc::clone(&m);
    let result = tokio::task::spawn_blocking(move || run_sweep(&model.predictor, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        Ok(sweep) => Ok(Json(sweep).into_response()),
        Err(e) => {
            warn!("sweep failed: {e}");
            Err(e.into())
        }
    }
}
