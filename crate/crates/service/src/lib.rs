//! HTTP front end for interactive modulation.
//!
//! A session holds one uploaded image. Its shared-prefix output is computed
//! on the first restore and reused by every later restore in the session.

use std::io::Cursor;
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cirnas_core::cost::{arch_flops_with, supernet_flops};
use cirnas_core::imageconv::{image_to_tensor, tensor_to_image};
use cirnas_core::{
    ModulationModel, PreparedInput, Resolution, SliceMode, SuperNetConfig, TaskVector, Tensor, TASK_DIM,
};
use image::{ImageFormat, ImageReader};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

pub const FLOPS_THIS_EFFECT: &str = "x-flops-this-effect";
pub const FLOPS_AMORTIZED: &str = "x-flops-amortized";
pub const FLOPS_CUMULATIVE: &str = "x-flops-cumulative";
pub const PREFIX_REUSED: &str = "x-prefix-reused";

/// Resolutions listed in the model info FLOPs table.
pub const INFO_RESOLUTIONS: [Resolution; 3] = [Resolution::HD, Resolution::QHD_2K, Resolution::UHD_4K];

#[derive(Clone, Copy, Debug)]
pub struct ServiceConfig {
    /// Largest accepted image side.
    pub max_dim: u32,
    pub cache_sessions: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_dim: 4096,
            cache_sessions: 16,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no model loaded")]
    NoModel,
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("image {width}x{height} exceeds the {max} pixel limit")]
    TooLarge { width: u32, height: u32, max: u32 },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("invalid task vector: {0}")]
    BadTask(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::BadImage(_) => StatusCode::BAD_REQUEST,
            ApiError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::BadTask(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(serde_json::json!({ "error": self.to_string() }));
        (self.status(), body).into_response()
    }
}

impl From<cirnas_core::Error> for ApiError {
    fn from(e: cirnas_core::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

struct Session {
    image: Tensor,
    prepared: Option<PreparedInput>,
    prefix_flops: u64,
    /// Tail plus controller cost of every restore so far.
    effect_flops: Vec<u64>,
    #[allow(dead_code)]
    created: SystemTime,
}

struct Inner {
    model: Option<Arc<ModulationModel>>,
    config: ServiceConfig,
    sessions: Mutex<LruCache<String, Arc<Mutex<Session>>>>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(model: Option<ModulationModel>, config: ServiceConfig) -> Self {
        let cap = NonZeroUsize::new(config.cache_sessions.max(1)).expect("nonzero");
        AppState {
            inner: Arc::new(Inner {
                model: model.map(Arc::new),
                config,
                sessions: Mutex::new(LruCache::new(cap)),
            }),
        }
    }

    fn model(&self) -> Result<Arc<ModulationModel>, ApiError> {
        self.inner.model.clone().ok_or(ApiError::NoModel)
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("session cache poisoned").len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RestoreRequest {
    pub task: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FlopsEntry {
    pub resolution: Resolution,
    pub supernet: u64,
    pub prefix: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub supernet: SuperNetConfig,
    pub sites: usize,
    pub channels: usize,
    pub prefix_len: usize,
    pub mode: SliceMode,
    pub epsilon: u64,
    pub flops: Vec<FlopsEntry>,
}

/// Reads the PNG header for the size check, then decodes.
fn decode_png(body: &[u8], max_dim: u32) -> Result<image::RgbImage, ApiError> {
    let reader = || ImageReader::with_format(Cursor::new(body), ImageFormat::Png);
    let (width, height) = reader()
        .into_dimensions()
        .map_err(|e| ApiError::BadImage(e.to_string()))?;
    if width > max_dim || height > max_dim {
        return Err(ApiError::TooLarge {
            width,
            height,
            max: max_dim,
        });
    }
    if width == 0 || height == 0 {
        return Err(ApiError::BadImage("empty image".into()));
    }
    let img = reader().decode().map_err(|e| ApiError::BadImage(e.to_string()))?;
    Ok(img.to_rgb8())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Json<SessionCreated>, ApiError> {
    state.model()?;
    let max = state.inner.config.max_dim;
    let (image, width, height) = blocking(move || {
        let img = decode_png(&body, max)?;
        let (w, h) = img.dimensions();
        Ok((image_to_tensor(&img)?, w, h))
    })
    .await?;
    let id = format!("{:032x}", rand::random::<u128>());
    let session = Session {
        image,
        prepared: None,
        prefix_flops: 0,
        effect_flops: Vec::new(),
        created: SystemTime::now(),
    };
    state
        .inner
        .sessions
        .lock()
        .expect("session cache poisoned")
        .put(id.clone(), Arc::new(Mutex::new(session)));
    tracing::debug!(%id, width, height, "session created");
    Ok(Json(SessionCreated {
        session_id: id,
        width,
        height,
    }))
}

fn parse_task(v: &[f64]) -> Result<TaskVector, ApiError> {
    if v.len() != TASK_DIM {
        return Err(ApiError::BadTask(format!(
            "expected {TASK_DIM} components, got {}",
            v.len()
        )));
    }
    let t = TaskVector(std::array::from_fn(|i| v[i]));
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ApiError::BadTask("non-finite component".into()));
    }
    t.validate().map_err(|e| ApiError::BadTask(e.to_string()))?;
    Ok(t)
}

struct Restored {
    png: Vec<u8>,
    this_effect: u64,
    cumulative: u64,
    amortized: f64,
    reused: bool,
}

fn restore_in_session(model: &ModulationModel, session: &Mutex<Session>, t: &TaskVector) -> Result<Restored, ApiError> {
    // Held for the whole call: restores within one session are serialized.
    let mut s = session.lock().expect("session poisoned");
    let reused = s.prepared.is_some();
    if !reused {
        let prepared = model.prepare(&s.image)?;
        s.prepared = Some(prepared);
    }
    let prepared = s.prepared.as_ref().expect("prepared above");
    let (y, flops) = model.apply(prepared, t)?;
    let effect = flops.tail + flops.epsilon;
    if !reused {
        s.prefix_flops = flops.prefix;
    }
    s.effect_flops.push(effect);
    let cumulative = s.prefix_flops + s.effect_flops.iter().sum::<u64>();
    let amortized = cumulative as f64 / s.effect_flops.len() as f64;
    let this_effect = if reused { effect } else { effect + flops.prefix };
    let mut png = Vec::new();
    tensor_to_image(&y, 0)?
        .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Restored {
        png,
        this_effect,
        cumulative,
        amortized,
        reused,
    })
}

async fn restore(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<RestoreRequest>,
) -> Result<Response, ApiError> {
    let model = state.model()?;
    let session = state
        .inner
        .sessions
        .lock()
        .expect("session cache poisoned")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::UnknownSession(id.clone()))?;
    let t = parse_task(&req.task)?;
    let r = blocking(move || restore_in_session(&model, &session, &t)).await?;
    let hv = |s: String| HeaderValue::from_str(&s).expect("ascii header");
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
        (
            HeaderName::from_static(FLOPS_THIS_EFFECT),
            hv(r.this_effect.to_string()),
        ),
        (HeaderName::from_static(FLOPS_AMORTIZED), hv(r.amortized.to_string())),
        (HeaderName::from_static(FLOPS_CUMULATIVE), hv(r.cumulative.to_string())),
        (HeaderName::from_static(PREFIX_REUSED), hv(r.reused.to_string())),
    ];
    Ok((headers, r.png).into_response())
}

/// Model metadata and FLOPs at the standard resolutions.
pub fn model_info(model: &ModulationModel) -> Result<ModelInfo, cirnas_core::Error> {
    let cfg = *model.config();
    let flops = INFO_RESOLUTIONS
        .iter()
        .map(|&res| {
            Ok(FlopsEntry {
                resolution: res,
                supernet: supernet_flops(&cfg, res)?,
                prefix: arch_flops_with(model.prefix_spec(), res, 0, model.mode())?.prefix,
            })
        })
        .collect::<Result<Vec<_>, cirnas_core::Error>>()?;
    Ok(ModelInfo {
        supernet: cfg,
        sites: cfg.num_sites(),
        channels: cfg.channels,
        prefix_len: model.prefix_len(),
        mode: model.mode(),
        epsilon: model.epsilon(),
        flops,
    })
}

async fn info(State(state): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    let model = state.model()?;
    Ok(Json(model_info(&model)?))
}

pub fn router(state: AppState) -> Router {
    // Room for an uncompressed-size PNG at the largest accepted dimensions.
    let max = state.inner.config.max_dim as usize;
    let body_limit = (max * max * 3 + (1 << 20)).max(8 << 20);
    Router::new()
        .route("/v1/session", post(create_session))
        .route("/v1/session/{id}/restore", post(restore))
        .route("/v1/model/info", get(info))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
