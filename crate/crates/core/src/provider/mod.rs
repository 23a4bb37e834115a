//! Uniform client layer for chat completion, token loss and text embedding.

pub mod http;
pub mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptBundle;
use crate::record::ImageRef;

pub use http::{HttpProvider, RateLimiter, RetryStats};
pub use mock::{CannedChat, HashEmbedder, MockLm, MockLmSpec, MockMode, ScriptedChat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("target is empty after tokenization")]
    EmptyTarget,
    #[error("provider does not accept images")]
    ImageUnsupported,
    #[error("token {0:?} is not in the provider vocabulary")]
    UnknownToken(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("malformed provider response: {0}")]
    Decode(String),
    #[error("auth: {0}")]
    Auth(String),
    #[error("no canned response for {0}")]
    NoFixture(String),
}

/// Inputs to one summed-NLL query: optional image, conditioning text, scored target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub context: String,
    pub target: String,
}

impl LossRequest {
    pub fn new(image: Option<&ImageRef>, context: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            image: image.cloned(),
            context: context.into(),
            target: target.into(),
        }
    }
}

/// Summed next-token negative log-likelihood (nats) over the target tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub sum_nll: f64,
    pub token_count: u32,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

/// Connection settings for a remote provider. `model_id` names the scoring model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Requests per second.
    #[serde(default = "default_rate_limit")]
    pub rate_limit: f64,
    pub model_id: String,
    /// Base delay for exponential backoff.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_rate_limit() -> f64 {
    5.0
}
fn default_backoff_ms() -> u64 {
    500
}

impl ProviderConfig {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_env: None,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            rate_limit: default_rate_limit(),
            model_id: model_id.into(),
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate_limit > 0.0 && self.rate_limit.is_finite()) {
            return Err(format!("rate_limit must be > 0, got {}", self.rate_limit));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!("timeout_secs must be > 0, got {}", self.timeout_secs));
        }
        if self.model_id.is_empty() {
            return Err("model_id is empty".into());
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(format!("endpoint must be an http(s) URL: {}", self.endpoint));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

pub trait ChatProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn chat_complete(&self, bundle: &PromptBundle, gen: &GenParams) -> Result<String, ProviderError>;
}

pub trait LossProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn supports_images(&self) -> bool;
    fn token_loss(&self, req: &LossRequest) -> Result<LossResult, ProviderError>;
}

pub trait EmbedProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

/// Checks that every vector has the same dimension and there is one per input.
pub(crate) fn check_embeddings(inputs: usize, vectors: &[Vec<f64>]) -> Result<(), ProviderError> {
    if vectors.len() != inputs {
        return Err(ProviderError::Decode(format!(
            "expected {inputs} vectors, got {}",
            vectors.len()
        )));
    }
    if let Some(first) = vectors.first() {
        let expected = first.len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != expected) {
            return Err(ProviderError::DimensionMismatch {
                expected,
                got: bad.len(),
            });
        }
    }
    Ok(())
}

/// Whitespace tokenization shared by the mocks.
pub fn whitespace_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}
