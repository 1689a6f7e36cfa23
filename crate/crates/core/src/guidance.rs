//! Pluggable image-space guidance.
//!
//! A provider looks at rendered views and returns a loss together with
//! `∂loss/∂pixel` for every view. The trainer applies those pixel gradients
//! to the render's backward pass. Providers that can only score images are
//! usable for evaluation but not for training.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{Camera, Image};

/// Wire protocol version spoken by [`RemoteGuidance`].
pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance provider cannot {0}")]
    Capability(&'static str),
    #[error("guidance request failed after {attempts} attempts: {message}")]
    Network { attempts: usize, message: String },
    #[error("guidance protocol: {0}")]
    Protocol(String),
    #[error("guidance views: {0}")]
    Views(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub provides_gradient: bool,
    pub provides_score: bool,
}

/// One rendered view handed to a provider. `index` refers to the provider's
/// own camera list when the view came from it.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceView<'a> {
    pub index: Option<usize>,
    pub camera: &'a Camera,
    pub image: &'a Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutput {
    pub loss: f64,
    /// Per view, `∂loss/∂pixel` in the layout of [`Image::data`].
    pub gradients: Vec<Vec<f64>>,
}

pub trait GuidanceProvider {
    fn capabilities(&self) -> Capabilities;

    /// Cameras the provider supervises; the trainer samples views from them.
    /// `None` lets the trainer pick random orbit views.
    fn cameras(&self) -> Option<Vec<Camera>> {
        None
    }

    fn evaluate(&mut self, views: &[GuidanceView<'_>], step: usize) -> Result<GuidanceOutput, GuidanceError>;

    fn score(&mut self, _views: &[GuidanceView<'_>], _step: usize) -> Result<f64, GuidanceError> {
        Err(GuidanceError::Capability("score images"))
    }
}

/// Constant-zero guidance.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroGuidance;

impl GuidanceProvider for ZeroGuidance {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            provides_gradient: true,
            provides_score: false,
        }
    }

    fn evaluate(&mut self, views: &[GuidanceView<'_>], _step: usize) -> Result<GuidanceOutput, GuidanceError> {
        Ok(GuidanceOutput {
            loss: 0.0,
            gradients: views.iter().map(|v| vec![0.0; v.image.data.len()]).collect(),
        })
    }
}

/// Mean squared pixel error against fixed target views, averaged over the
/// views of a step.
#[derive(Debug, Clone)]
pub struct ReconstructionGuidance {
    targets: Vec<(Camera, Image)>,
}

impl ReconstructionGuidance {
    pub fn new(targets: Vec<(Camera, Image)>) -> Result<Self, GuidanceError> {
        if targets.is_empty() {
            return Err(GuidanceError::Views("no target views".into()));
        }
        for (i, (cam, img)) in targets.iter().enumerate() {
            if cam.width != img.width || cam.height != img.height {
                return Err(GuidanceError::Views(format!(
                    "view {i}: camera {}x{} but image {}x{}",
                    cam.width, cam.height, img.width, img.height
                )));
            }
        }
        Ok(Self { targets })
    }

    pub fn targets(&self) -> &[(Camera, Image)] {
        &self.targets
    }
}

impl GuidanceProvider for ReconstructionGuidance {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            provides_gradient: true,
            provides_score: true,
        }
    }

    fn cameras(&self) -> Option<Vec<Camera>> {
        Some(self.targets.iter().map(|t| t.0).collect())
    }

    fn evaluate(&mut self, views: &[GuidanceView<'_>], _step: usize) -> Result<GuidanceOutput, GuidanceError> {
        let mut loss = 0.0;
        let mut gradients = Vec::with_capacity(views.len());
        let k = views.len() as f64;
        for v in views {
            let i = v.index.ok_or_else(|| GuidanceError::Views("reconstruction needs views from its own cameras".into()))?;
            let target = &self.targets.get(i).ok_or_else(|| GuidanceError::Views(format!("view index {i} out of range")))?.1;
            if target.data.len() != v.image.data.len() {
                return Err(GuidanceError::Views(format!("view {i}: image size mismatch")));
            }
            let n = target.data.len() as f64;
            let mut grad = Vec::with_capacity(target.data.len());
            let mut sq = 0.0;
            for (&r, &t) in v.image.data.iter().zip(&target.data) {
                sq += (r - t) * (r - t);
                grad.push(2.0 * (r - t) / (n * k));
            }
            loss += sq / (n * k);
            gradients.push(grad);
        }
        Ok(GuidanceOutput { loss, gradients })
    }

    /// Negative mean squared error.
    fn score(&mut self, views: &[GuidanceView<'_>], step: usize) -> Result<f64, GuidanceError> {
        Ok(-self.evaluate(views, step)?.loss)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreRequest {
    /// Base64-encoded PNG images.
    pub images: Vec<String>,
    pub prompt: String,
    pub step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct ScoreResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Per image, base64 of little-endian f32 `∂loss/∂pixel`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradients: Option<Vec<String>>,
    /// Shape of each gradient array, `[height, width, 3]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HealthResponse {
    pub protocol: String,
    pub model: String,
}

pub fn encode_request(views: &[GuidanceView<'_>], prompt: &str, step: usize) -> ScoreRequest {
    ScoreRequest {
        images: views.iter().map(|v| B64.encode(v.image.encode_png())).collect(),
        prompt: prompt.to_string(),
        step,
    }
}

pub fn encode_gradient(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_gradient(text: &str, expected: usize) -> Result<Vec<f64>, GuidanceError> {
    let bytes = B64.decode(text).map_err(|e| GuidanceError::Protocol(format!("gradient base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(GuidanceError::Protocol(format!(
            "gradient has {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GuidanceError::Protocol("non-finite gradient value".into()));
    }
    Ok(values)
}

/// Parses a gradient response for `views`.
pub fn decode_gradients(resp: &ScoreResponse, views: &[GuidanceView<'_>]) -> Result<GuidanceOutput, GuidanceError> {
    let grads = resp
        .gradients
        .as_ref()
        .ok_or_else(|| GuidanceError::Protocol("response carries no gradients".into()))?;
    if grads.len() != views.len() {
        return Err(GuidanceError::Protocol(format!("{} gradients for {} images", grads.len(), views.len())));
    }
    let mut gradients = Vec::with_capacity(views.len());
    for (g, v) in grads.iter().zip(views) {
        let expected = [v.image.height, v.image.width, 3];
        if let Some(shape) = &resp.shape {
            if shape.as_slice() != expected {
                return Err(GuidanceError::Protocol(format!("gradient shape {shape:?}, expected {expected:?}")));
            }
        }
        gradients.push(decode_gradient(g, v.image.data.len())?);
    }
    let loss = resp.loss.or(resp.score.map(|s| -s)).unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(GuidanceError::Protocol("non-finite loss".into()));
    }
    Ok(GuidanceOutput { loss, gradients })
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Service base URL, e.g. `http://127.0.0.1:8765`.
    pub endpoint: String,
    pub prompt: String,
    pub timeout: Duration,
    pub retries: usize,
    pub backoff: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: &str, prompt: &str) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            prompt: prompt.to_string(),
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_millis(250),
        }
    }
}

/// Client for an external scoring service (`POST /v1/score`).
pub struct RemoteGuidance {
    config: RemoteConfig,
    agent: ureq::Agent,
    capabilities: Capabilities,
}

impl RemoteGuidance {
    /// `provides_gradient` declares whether the service answers with
    /// gradients; score-only services cannot drive training.
    pub fn new(config: RemoteConfig, provides_gradient: bool) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            agent,
            capabilities: Capabilities {
                provides_gradient,
                provides_score: true,
            },
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.endpoint)
    }

    /// Runs `f` with exponential backoff. Server errors (5xx) and transport
    /// failures are retried; other statuses are protocol errors.
    fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T, Attempt>) -> Result<T, GuidanceError> {
        let attempts = self.config.retries + 1;
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for i in 0..attempts {
            match f() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
            if i + 1 < attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(GuidanceError::Network { attempts, message: last })
    }

    fn post(&self, req: &ScoreRequest) -> Result<ScoreResponse, GuidanceError> {
        let url = self.url("/v1/score");
        self.with_retries(|| {
            let mut resp = self
                .agent
                .post(&url)
                .header("content-type", "application/json")
                .send_json(req)
                .map_err(|e| Attempt::Retry(e.to_string()))?;
            let status = resp.status().as_u16();
            let body = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
            match status {
                200..=299 => serde_json::from_str(&body).map_err(|e| Attempt::Fatal(GuidanceError::Protocol(format!("response schema: {e}")))),
                500..=599 => Err(Attempt::Retry(format!("HTTP {status}: {body}"))),
                _ => Err(Attempt::Fatal(GuidanceError::Protocol(format!("HTTP {status}: {body}")))),
            }
        })
    }

    pub fn health(&self) -> Result<HealthResponse, GuidanceError> {
        let url = self.url("/v1/health");
        let health: HealthResponse = self.with_retries(|| {
            let mut resp = self.agent.get(&url).call().map_err(|e| Attempt::Retry(e.to_string()))?;
            let body = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(e.to_string()))?;
            serde_json::from_str(&body).map_err(|e| Attempt::Fatal(GuidanceError::Protocol(format!("health schema: {e}"))))
        })?;
        if health.protocol != PROTOCOL_VERSION {
            return Err(GuidanceError::Protocol(format!(
                "service speaks protocol {}, client speaks {PROTOCOL_VERSION}",
                health.protocol
            )));
        }
        Ok(health)
    }
}

enum Attempt {
    Retry(String),
    Fatal(GuidanceError),
}

impl GuidanceProvider for RemoteGuidance {
    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn evaluate(&mut self, views: &[GuidanceView<'_>], step: usize) -> Result<GuidanceOutput, GuidanceError> {
        if !self.capabilities.provides_gradient {
            return Err(GuidanceError::Capability("provide gradients (score-only service)"));
        }
        let resp = self.post(&encode_request(views, &self.config.prompt, step))?;
        decode_gradients(&resp, views)
    }

    fn score(&mut self, views: &[GuidanceView<'_>], step: usize) -> Result<f64, GuidanceError> {
        let resp = self.post(&encode_request(views, &self.config.prompt, step))?;
        match resp.score {
            Some(s) if s.is_finite() => Ok(s),
            Some(_) => Err(GuidanceError::Protocol("non-finite score".into())),
            None => Err(GuidanceError::Protocol("response carries no score".into())),
        }
    }
}
