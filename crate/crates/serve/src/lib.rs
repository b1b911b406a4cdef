//! HTTP service answering recognition requests from a loaded checkpoint.
//!
//! Endpoints: `GET /healthz`, `GET /model`, `POST /recognize`.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sketchparse_core::checkpoint::{sha256_hex, Checkpoint};
use sketchparse_core::sketch::normalize;
use sketchparse_core::{Scenario, Sketch, Stroke};

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct RecognizeRequest {
    pub strokes: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub name: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeComponent {
    pub id: usize,
    pub name: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Existence {
    pub name: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionResult {
    /// All categories, most probable first.
    pub categories: Vec<CategoryScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stroke_components: Option<Vec<StrokeComponent>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub existence: Option<Vec<Existence>>,
    pub assignment: Vec<Vec<f64>>,
    pub explanation: String,
}

/// Read-only model state shared by all requests.
pub struct AppState {
    pub checkpoint: Checkpoint,
    pub checkpoint_sha256: String,
}

impl AppState {
    pub fn new(checkpoint: Checkpoint) -> Result<Self, sketchparse_core::Error> {
        let checkpoint_sha256 = sha256_hex(&checkpoint.to_bytes()?);
        Ok(Self {
            checkpoint,
            checkpoint_sha256,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, sketchparse_core::Error> {
        let bytes = std::fs::read(path)?;
        Ok(Self {
            checkpoint: Checkpoint::from_bytes(&bytes)?,
            checkpoint_sha256: sha256_hex(&bytes),
        })
    }

    pub fn model_info(&self) -> Value {
        let ck = &self.checkpoint;
        json!({
            "scenario": ck.scenario,
            "label_space": serde_json::from_str::<Value>(&ck.label_space.to_json()).unwrap_or(Value::Null),
            "dims": ck.network.config,
            "checkpoint_sha256": self.checkpoint_sha256,
        })
    }

    /// Normalizes raw strokes and runs the model.
    pub fn recognize(&self, request: &RecognizeRequest) -> Result<RecognitionResult, ApiError> {
        let ck = &self.checkpoint;
        let max = ck.network.config.max_strokes;
        if request.strokes.is_empty() {
            return Err(ApiError::Unprocessable("strokes must not be empty".into()));
        }
        if request.strokes.len() > max {
            return Err(ApiError::Unprocessable(format!(
                "{} strokes exceeds the limit of {max}",
                request.strokes.len()
            )));
        }
        let strokes = request
            .strokes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Stroke::from_xy(s).map_err(|e| ApiError::Unprocessable(format!("stroke {i}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let raw = Sketch {
            strokes,
            category: 0,
            stroke_components: None,
        };
        let sketch = normalize(&raw).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
        let p = ck
            .network
            .predict(&ck.store, &sketch, &ck.scenario)
            .map_err(|e| ApiError::Internal(e.to_string()))?;

        let ls = &ck.label_space;
        let mut order: Vec<usize> = (0..p.category_probs.len()).collect();
        order.sort_by(|&a, &b| {
            p.category_probs[b]
                .total_cmp(&p.category_probs[a])
                .then(a.cmp(&b))
        });
        let categories: Vec<CategoryScore> = order
            .iter()
            .map(|&c| CategoryScore {
                name: ls.categories[c].clone(),
                p: p.category_probs[c],
            })
            .collect();

        let stroke_components = p.stroke_components.as_ref().map(|seg| {
            seg.iter()
                .map(|&(id, prob)| StrokeComponent {
                    id,
                    name: ls.components[id].clone(),
                    p: prob,
                })
                .collect::<Vec<_>>()
        });
        let existence = p.existence.as_ref().map(|e| {
            e.iter()
                .enumerate()
                .map(|(j, &prob)| Existence {
                    name: ls.components[j].clone(),
                    p: prob,
                })
                .collect::<Vec<_>>()
        });

        let detected: Vec<usize> = match ck.scenario.scenario {
            Scenario::PriorInfo => p
                .existence
                .iter()
                .flatten()
                .enumerate()
                .filter(|(_, &prob)| prob >= 0.5)
                .map(|(j, _)| j)
                .collect(),
            Scenario::LabelsFull => distinct(p.stroke_components.iter().flatten().map(|&(j, _)| j)),
            Scenario::CategoryOnly => distinct(p.assigned_components().into_iter()),
        };
        let names: Vec<&str> = detected
            .iter()
            .map(|&j| ls.components[j].as_str())
            .collect();
        let explanation = if names.is_empty() {
            format!(
                "Recognized as {} with no component detected.",
                categories[0].name
            )
        } else {
            format!(
                "Recognized as {} because it is composed of: {}.",
                categories[0].name,
                names.join(", ")
            )
        };

        Ok(RecognitionResult {
            categories,
            stroke_components,
            existence,
            assignment: p.assignment,
            explanation,
        })
    }
}

/// Sorted unique ids.
fn distinct(ids: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = ids.collect();
    v.sort_unstable();
    v.dedup();
    v
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn model(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(state.model_info())
}

async fn recognize(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<RecognitionResult>, ApiError> {
    let request: RecognizeRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let result = tokio::task::spawn_blocking(move || state.recognize(&request))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(result))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/model", get(model))
        .route("/recognize", post(recognize))
        .with_state(state)
}

/// Binds `addr` (failing if it is taken) and serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
