//! HTTP front for a trained generator checkpoint.
//!
//! Endpoints: `GET /health`, `GET /meta`, `POST /inpaint`. The model is
//! loaded once and shared read-only between request handlers.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use serde::{Deserialize, Serialize};

use wgain_core::checkpoint;
use wgain_core::corpus::{decode_image, preprocess_mask};
use wgain_core::mask::{EvalScenario, TrainScenarios};
use wgain_core::model::{inpaint_seeded, WgainModel};
use wgain_core::{ImageTensor, MaskMatrix};

pub const INFERENCE_TIME_HEADER: &str = "x-inference-time-ms";
pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceOptions {
    pub max_payload_bytes: usize,
    /// Crop and resize inputs to the model side instead of rejecting them.
    pub allow_resize: bool,
    pub sigma: f64,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES, allow_resize: false, sigma: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint: String,
    pub input_side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub label: String,
    pub scenario: EvalScenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub input_side: usize,
    /// Mask pixels with this value are treated as missing.
    pub missing_value: u8,
    pub presets: Vec<Preset>,
    pub noise_range: (f64, f64),
    pub center_side_range: (usize, usize),
    pub allow_resize: bool,
    pub max_payload_bytes: usize,
    pub requests_served: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "undecodable", message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "size_mismatch", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<axum::extract::multipart::MultipartError> for ApiError {
    fn from(e: axum::extract::multipart::MultipartError) -> Self {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            Self::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", e.body_text())
        } else {
            Self::bad_request(e.body_text())
        }
    }
}

/// Shared, immutable service state.
pub struct AppState {
    model: WgainModel<f32>,
    checkpoint_hash: String,
    options: ServiceOptions,
    served: AtomicU64,
}

impl AppState {
    pub fn new(model: WgainModel<f32>, checkpoint_hash: String, options: ServiceOptions) -> Self {
        Self { model, checkpoint_hash, options, served: AtomicU64::new(0) }
    }

    pub fn from_checkpoint(dir: &Path, options: ServiceOptions) -> wgain_core::Result<Self> {
        let ck = checkpoint::load(dir, None)?;
        Ok(Self::new(ck.model, ck.manifest.content_hash, options))
    }

    pub fn input_side(&self) -> usize {
        self.model.generator.config.input_side
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.options.max_payload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/meta", get(meta))
        .route("/inpaint", post(inpaint))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health { status: "ok".into(), checkpoint: state.checkpoint_hash.clone(), input_side: state.input_side() })
}

async fn meta(State(state): State<Arc<AppState>>) -> Json<Meta> {
    let side = state.input_side();
    let mix = TrainScenarios::default();
    Json(Meta {
        input_side: side,
        missing_value: 0,
        presets: EvalScenario::standard_set(side).into_iter().map(|s| Preset { label: s.label(), scenario: s }).collect(),
        noise_range: mix.noise_p,
        center_side_range: mix.center_side_range(side).unwrap_or((1, side)),
        allow_resize: state.options.allow_resize,
        max_payload_bytes: state.options.max_payload_bytes,
        requests_served: state.served.load(Ordering::Relaxed),
    })
}

#[derive(Debug, Default, Deserialize)]
pub struct InpaintQuery {
    #[serde(default)]
    pub grid: Option<u8>,
}

struct InpaintInput {
    image: ImageTensor,
    mask: MaskMatrix,
    seed: Option<u64>,
}

async fn read_input(mut multipart: Multipart) -> Result<InpaintInput, ApiError> {
    let (mut image, mut mask, mut seed) = (None, None, None);
    while let Some(field) = multipart.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        let content_type = field.content_type().unwrap_or_default().to_string();
        let bytes = field.bytes().await?;
        match name.as_str() {
            "image" => image = Some(decode_image(&bytes).map_err(|e| ApiError::bad_request(format!("image: {e}")))?),
            "mask" => {
                let decoded = if content_type.starts_with("text/") {
                    let text = std::str::from_utf8(&bytes).map_err(|_| ApiError::bad_request("mask text is not UTF-8"))?;
                    MaskMatrix::from_rle(text.trim())
                } else {
                    MaskMatrix::decode_png(&bytes)
                };
                mask = Some(decoded.map_err(|e| ApiError::bad_request(format!("mask: {e}")))?);
            }
            "seed" => {
                let text = std::str::from_utf8(&bytes).map_err(|_| ApiError::bad_request("seed is not UTF-8"))?;
                seed = Some(text.trim().parse().map_err(|_| ApiError::bad_request(format!("seed {text:?} is not an unsigned integer")))?);
            }
            _ => {}
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing multipart field `image`"))?;
    let mask = mask.ok_or_else(|| ApiError::bad_request("missing multipart field `mask`"))?;
    Ok(InpaintInput { image, mask, seed })
}

/// Brings image and mask to the model side, or rejects them.
fn conform(state: &AppState, input: InpaintInput) -> Result<InpaintInput, ApiError> {
    let InpaintInput { image, mask, seed } = input;
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(ApiError::unprocessable(format!(
            "image is {}x{} but mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    let side = state.input_side();
    if image.height() == side && image.width() == side {
        return Ok(InpaintInput { image, mask, seed });
    }
    if !state.options.allow_resize {
        return Err(ApiError::unprocessable(format!(
            "input is {}x{} but the model expects {side}x{side}",
            image.height(),
            image.width()
        )));
    }
    let png = image.encode_png().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let raw = image::load_from_memory(&png).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let image = wgain_core::corpus::preprocess_image(&raw, side).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mask = preprocess_mask(&mask, side).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(InpaintInput { image, mask, seed })
}

/// Original, damaged view and result side by side.
fn side_by_side(tiles: &[ImageTensor]) -> image::RgbImage {
    let (h, w) = (tiles[0].height() as u32, tiles[0].width() as u32);
    let mut canvas = image::RgbImage::from_pixel(tiles.len() as u32 * (w + 2) - 2, h, image::Rgb([255, 255, 255]));
    for (i, t) in tiles.iter().enumerate() {
        image::imageops::replace(&mut canvas, &t.to_rgb8(), (i as u32 * (w + 2)) as i64, 0);
    }
    canvas
}

fn png_bytes(img: image::RgbImage) -> Result<Vec<u8>, ApiError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encode_failed", e.to_string()))?;
    Ok(buf.into_inner())
}

async fn inpaint(
    State(state): State<Arc<AppState>>,
    Query(query): Query<InpaintQuery>,
    multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> Result<Response, ApiError> {
    let multipart = multipart.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let input = conform(&state, read_input(multipart).await?)?;
    let grid = query.grid.unwrap_or(0) != 0;
    let worker = state.clone();
    let (png, elapsed_ms) = tokio::task::spawn_blocking(move || -> Result<(Vec<u8>, f64), ApiError> {
        let started = Instant::now();
        let seed = input.seed.unwrap_or_else(rand::random);
        let out = inpaint_seeded(&worker.model.generator, &input.image, &input.mask, worker.options.sigma, seed)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_failed", e.to_string()))?;
        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        let png = if grid {
            let damaged = wgain_core::eval::damaged_view(&input.image, &input.mask)
                .map_err(|e| ApiError::unprocessable(e.to_string()))?;
            png_bytes(side_by_side(&[input.image, damaged, out]))?
        } else {
            out.encode_png().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encode_failed", e.to_string()))?
        };
        Ok((png, elapsed_ms))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker_failed", e.to_string()))??;
    state.served.fetch_add(1, Ordering::Relaxed);
    log::info!("inpaint served in {elapsed_ms:.1} ms");
    let mut resp = (StatusCode::OK, png).into_response();
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    resp.headers_mut().insert(INFERENCE_TIME_HEADER, HeaderValue::from_str(&format!("{elapsed_ms:.3}")).expect("ascii"));
    Ok(resp)
}

pub use axum::Router;

/// Serves `app` on an already bound listener until ctrl-c.
pub async fn serve_on(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, router(Arc::new(state))).await
}
