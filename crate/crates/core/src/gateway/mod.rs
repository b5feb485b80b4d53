//! Uniform access to chat-completion backends.
//!
//! The [`Gateway`] owns a registry of models, a response cache, per-model rate
//! limiters and a cost ledger. Backends are either an OpenAI-compatible HTTP
//! endpoint or the scriptable [`MockBackend`].

mod cache;
mod http;
mod limiter;
mod mock;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imageprep::{token_scale_factor, ImageInput, ResolutionLevel};
use crate::layer::SceneLayer;

pub use cache::{CacheMode, CachedReply, ResponseCache};
pub use http::HttpBackend;
pub use limiter::RateLimiter;
pub use mock::{FailureKind, MockBackend, OracleConfig, OracleLabel, RecordedCall, ScriptRecord};

/// Default token cost of one 360p image when a backend omits usage data.
pub const DEFAULT_IMAGE_BASE_TOKENS: u32 = 258;

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    8
}
fn default_image_tokens() -> u32 {
    DEFAULT_IMAGE_BASE_TOKENS
}
fn default_api_key_env() -> String {
    "SCENELAYERS_API_KEY".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Endpoint {
    OpenaiCompatible {
        base_url: String,
        /// Model id sent on the wire; defaults to the registry name.
        #[serde(default)]
        remote_model: Option<String>,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
    },
    Mock {
        #[serde(default)]
        fixture: Option<PathBuf>,
        #[serde(default)]
        oracle: Option<OracleConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub endpoint: Endpoint,
    /// Price per million input tokens.
    #[serde(default)]
    pub input_price: f64,
    /// Price per million output tokens.
    #[serde(default)]
    pub output_price: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default = "default_image_tokens")]
    pub image_base_tokens: u32,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, endpoint: Endpoint) -> Self {
        ModelSpec {
            name: name.into(),
            endpoint,
            input_price: 0.0,
            output_price: 0.0,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            max_in_flight: default_in_flight(),
            requests_per_minute: None,
            image_base_tokens: DEFAULT_IMAGE_BASE_TOKENS,
        }
    }

    /// A mock model with no fixture and no oracle.
    pub fn mock(name: impl Into<String>) -> Self {
        Self::new(
            name,
            Endpoint::Mock {
                fixture: None,
                oracle: None,
            },
        )
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |reason: &str| GatewayError::InvalidSpec {
            model: self.name.clone(),
            reason: reason.to_string(),
        };
        if !(self.input_price >= 0.0 && self.output_price >= 0.0) {
            return Err(invalid("prices must be non-negative"));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(invalid("timeout must be positive"));
        }
        if self.max_in_flight == 0 {
            return Err(invalid("max_in_flight must be at least 1"));
        }
        Ok(())
    }

    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        input_tokens as f64 * self.input_price / 1e6
            + output_tokens as f64 * self.output_price / 1e6
    }
}

/// What a request is for. Carried as trace metadata; never sent on the wire
/// and not part of the cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum QueryPurpose {
    LayerExtraction(SceneLayer),
    SceneDescription,
    Evaluation,
    Direct,
    InstructionProposal,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub item_id: Option<String>,
    pub purpose: QueryPurpose,
}

impl Default for RequestTrace {
    fn default() -> Self {
        RequestTrace {
            item_id: None,
            purpose: QueryPurpose::Other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub model: String,
    pub system: Option<String>,
    pub user: String,
    pub image: Option<ImageInput>,
    pub max_output_tokens: u32,
    pub trace: RequestTrace,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            system: None,
            user: user.into(),
            image: None,
            max_output_tokens: 1024,
            trace: RequestTrace::default(),
        }
    }

    pub fn with_image(mut self, image: ImageInput) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn with_trace(mut self, item_id: Option<&str>, purpose: QueryPurpose) -> Self {
        self.trace = RequestTrace {
            item_id: item_id.map(str::to_string),
            purpose,
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Image share of `input_tokens` (estimated).
    pub image_tokens: u64,
    /// True when token counts are local estimates rather than backend usage.
    pub tokens_estimated: bool,
    pub latency_s: f64,
    /// Billed cost; zero on cache hits.
    pub cost: f64,
    pub cache_hit: bool,
    pub attempt_count: u32,
    pub cache_key: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendFailure {
    Transport(String),
    Timeout,
    Http { status: u16, body: String },
}

impl BackendFailure {
    fn retryable(&self) -> bool {
        match self {
            BackendFailure::Transport(_) | BackendFailure::Timeout => true,
            BackendFailure::Http { status, .. } => *status == 429 || *status >= 500,
        }
    }
}

/// A chat-completion backend. Implementations must be callable concurrently.
pub trait Backend: Send + Sync {
    fn send(
        &self,
        spec: &ModelSpec,
        request: &ChatRequest,
        key: &str,
    ) -> Result<BackendReply, BackendFailure>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid model spec `{model}`: {reason}")]
    InvalidSpec { model: String, reason: String },
    #[error("transport error after {attempts} attempt(s) [cache key {key}]: {message}")]
    Transport {
        key: String,
        attempts: u32,
        message: String,
    },
    #[error("backend returned HTTP {status} [cache key {key}]: {body}")]
    Backend {
        key: String,
        status: u16,
        body: String,
    },
    #[error("request timed out [cache key {key}]")]
    Timeout { key: String },
}

impl GatewayError {
    pub fn cache_key(&self) -> Option<&str> {
        match self {
            GatewayError::Transport { key, .. }
            | GatewayError::Backend { key, .. }
            | GatewayError::Timeout { key } => Some(key),
            _ => None,
        }
    }
}

/// Stable digest over every request component that affects the completion.
pub fn cache_key(request: &ChatRequest, temperature: f64) -> String {
    fn field(h: &mut Sha256, bytes: &[u8]) {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    let mut h = Sha256::new();
    field(&mut h, request.model.as_bytes());
    field(&mut h, &temperature.to_bits().to_le_bytes());
    match &request.system {
        Some(s) => field(&mut h, format!("1{s}").as_bytes()),
        None => field(&mut h, b"0"),
    }
    field(&mut h, request.user.as_bytes());
    match &request.image {
        Some(img) => field(&mut h, format!("1{}", img.digest()).as_bytes()),
        None => field(&mut h, b"0"),
    }
    field(&mut h, &request.max_output_tokens.to_le_bytes());
    hex::encode(h.finalize())
}

/// Estimated image tokens: `base` tokens at 360p scaled by pixel count.
pub fn estimate_image_tokens(image: &ImageInput, base_tokens: u32) -> u64 {
    let factor = match image.rendition {
        Some(r) => token_scale_factor(r.level, ResolutionLevel::P360),
        None => {
            let r = f64::from(image.height) / 360.0;
            r * r
        }
    };
    (f64::from(base_tokens) * factor).round() as u64
}

/// `ceil(chars / 4)` for text plus the image estimate.
pub fn estimate_tokens(text: &str, image: Option<&ImageInput>, base_image_tokens: u32) -> u64 {
    let chars = text.chars().count() as u64;
    chars.div_ceil(4) + image.map_or(0, |img| estimate_image_tokens(img, base_image_tokens))
}

/// Running totals for one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub base: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_millis(500),
            max: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Backoff {
            base: Duration::ZERO,
            max: Duration::ZERO,
        }
    }

    fn delay(&self, retry: u32) -> Duration {
        self.base
            .saturating_mul(1u32 << retry.min(16))
            .min(self.max)
    }
}

struct Registered {
    spec: ModelSpec,
    backend: Arc<dyn Backend>,
    limiter: RateLimiter,
    ledger: Mutex<CostLedger>,
}

pub struct Gateway {
    models: HashMap<String, Registered>,
    cache: ResponseCache,
    backoff: Backoff,
}

impl Gateway {
    pub fn new(cache: CacheMode) -> Self {
        Gateway {
            models: HashMap::new(),
            cache: ResponseCache::new(cache),
            backoff: Backoff::default(),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    /// Registers a model, building its backend from the endpoint kind.
    pub fn register(&mut self, spec: ModelSpec) -> Result<(), GatewayError> {
        let backend: Arc<dyn Backend> = match &spec.endpoint {
            Endpoint::OpenaiCompatible { .. } => Arc::new(HttpBackend::new(&spec)?),
            Endpoint::Mock { fixture, oracle } => Arc::new(MockBackend::from_config(
                fixture.as_deref(),
                oracle.as_ref(),
            )?),
        };
        self.register_backend(spec, backend)
    }

    pub fn register_backend(
        &mut self,
        spec: ModelSpec,
        backend: Arc<dyn Backend>,
    ) -> Result<(), GatewayError> {
        spec.validate()?;
        let limiter = RateLimiter::new(spec.max_in_flight, spec.requests_per_minute);
        self.models.insert(
            spec.name.clone(),
            Registered {
                spec,
                backend,
                limiter,
                ledger: Mutex::new(CostLedger::default()),
            },
        );
        Ok(())
    }

    pub fn spec(&self, model: &str) -> Result<&ModelSpec, GatewayError> {
        self.models
            .get(model)
            .map(|r| &r.spec)
            .ok_or_else(|| GatewayError::UnknownModel(model.to_string()))
    }

    pub fn model_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.models.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn ledger(&self, model: &str) -> Option<CostLedger> {
        self.models
            .get(model)
            .map(|r| r.ledger.lock().expect("ledger lock").clone())
    }

    /// Highest number of simultaneously in-flight backend requests seen for a model.
    pub fn peak_in_flight(&self, model: &str) -> Option<usize> {
        self.models.get(model).map(|r| r.limiter.peak())
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let reg = self
            .models
            .get(&request.model)
            .ok_or_else(|| GatewayError::UnknownModel(request.model.clone()))?;
        let spec = &reg.spec;
        let key = cache_key(request, spec.temperature);
        let start = Instant::now();

        if let Some(hit) = self.cache.get(&key) {
            reg.ledger.lock().expect("ledger lock").cache_hits += 1;
            return Ok(ChatResponse {
                text: hit.text,
                input_tokens: hit.input_tokens,
                output_tokens: hit.output_tokens,
                image_tokens: hit.image_tokens,
                tokens_estimated: hit.tokens_estimated,
                latency_s: start.elapsed().as_secs_f64(),
                cost: 0.0,
                cache_hit: true,
                attempt_count: 0,
                cache_key: key,
            });
        }

        let (reply, retries, latency) = {
            let _permit = reg.limiter.acquire();
            let sent = Instant::now();
            let mut retry = 0u32;
            loop {
                match reg.backend.send(spec, request, &key) {
                    Ok(reply) => break (reply, retry, sent.elapsed().as_secs_f64()),
                    Err(failure) if failure.retryable() && retry < spec.max_retries => {
                        log::debug!(
                            "model {}: attempt {} failed ({failure:?}), retrying",
                            spec.name,
                            retry + 1
                        );
                        std::thread::sleep(self.backoff.delay(retry));
                        retry += 1;
                    }
                    Err(failure) => return Err(into_error(failure, key, retry + 1)),
                }
            }
        };

        let image_tokens = request
            .image
            .as_ref()
            .map_or(0, |img| estimate_image_tokens(img, spec.image_base_tokens));
        let (input_tokens, output_tokens, tokens_estimated) = match reply.usage {
            Some(u) => (u.input_tokens, u.output_tokens, false),
            None => {
                let prompt = format!(
                    "{}{}",
                    request.system.as_deref().unwrap_or(""),
                    request.user
                );
                let input =
                    estimate_tokens(&prompt, request.image.as_ref(), spec.image_base_tokens);
                (input, estimate_tokens(&reply.text, None, 0), true)
            }
        };
        let cost = spec.cost(input_tokens, output_tokens);
        {
            let mut ledger = reg.ledger.lock().expect("ledger lock");
            ledger.backend_calls += 1;
            ledger.input_tokens += input_tokens;
            ledger.output_tokens += output_tokens;
            ledger.total_cost += cost;
        }
        self.cache.put(
            &key,
            &CachedReply {
                text: reply.text.clone(),
                input_tokens,
                output_tokens,
                image_tokens,
                tokens_estimated,
            },
        );
        Ok(ChatResponse {
            text: reply.text,
            input_tokens,
            output_tokens,
            image_tokens,
            tokens_estimated,
            latency_s: latency,
            cost,
            cache_hit: false,
            attempt_count: retries,
            cache_key: key,
        })
    }
}

fn into_error(failure: BackendFailure, key: String, attempts: u32) -> GatewayError {
    match failure {
        BackendFailure::Transport(message) => GatewayError::Transport {
            key,
            attempts,
            message,
        },
        BackendFailure::Timeout => GatewayError::Timeout { key },
        BackendFailure::Http { status, body } => GatewayError::Backend { key, status, body },
    }
}
