//! Async client for the inpainting service.

use thiserror::Error;

pub use wgain_service::{ErrorBody, Health, Meta, INFERENCE_TIME_HEADER};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with a JSON error body.
    #[error("service returned {status}: {} ({})", .body.message, .body.code)]
    Service { status: u16, body: ErrorBody },
    #[error("service returned {status}: {text}")]
    Unexpected { status: u16, text: String },
}

impl ClientError {
    /// True when the request itself was rejected (4xx).
    pub fn is_client_error(&self) -> bool {
        matches!(self, ClientError::Service { status, .. } | ClientError::Unexpected { status, .. } if (400..500).contains(status))
    }
}

/// Mask payload: PNG bytes or the run-length text form.
#[derive(Debug, Clone)]
pub enum MaskPayload {
    Png(Vec<u8>),
    Rle(String),
}

#[derive(Debug, Clone, Default)]
pub struct InpaintOptions {
    pub seed: Option<u64>,
    /// Ask for original, damaged and result side by side.
    pub grid: bool,
}

#[derive(Debug, Clone)]
pub struct InpaintResponse {
    pub png: Vec<u8>,
    pub inference_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: &str) -> Self {
        Self { base: base_url.trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => ClientError::Service { status: status.as_u16(), body },
            Err(_) => ClientError::Unexpected { status: status.as_u16(), text },
        })
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        Ok(Self::check(self.http.get(self.url("/health")).send().await?).await?.json().await?)
    }

    pub async fn meta(&self) -> Result<Meta, ClientError> {
        Ok(Self::check(self.http.get(self.url("/meta")).send().await?).await?.json().await?)
    }

    pub async fn inpaint(&self, image: Vec<u8>, mask: MaskPayload, opts: &InpaintOptions) -> Result<InpaintResponse, ClientError> {
        let image_part = reqwest::multipart::Part::bytes(image).file_name("image").mime_str("application/octet-stream")?;
        let mask_part = match mask {
            MaskPayload::Png(bytes) => reqwest::multipart::Part::bytes(bytes).file_name("mask.png").mime_str("image/png")?,
            MaskPayload::Rle(text) => reqwest::multipart::Part::text(text).mime_str("text/plain")?,
        };
        let mut form = reqwest::multipart::Form::new().part("image", image_part).part("mask", mask_part);
        if let Some(seed) = opts.seed {
            form = form.text("seed", seed.to_string());
        }
        let url = if opts.grid { self.url("/inpaint?grid=1") } else { self.url("/inpaint") };
        let resp = Self::check(self.http.post(url).multipart(form).send().await?).await?;
        let inference_ms = resp
            .headers()
            .get(INFERENCE_TIME_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        Ok(InpaintResponse { png: resp.bytes().await?.to_vec(), inference_ms })
    }
}
