//! HTTP client for the provider wire protocol.
//!
//! ```text
//! POST /v1/chat        {messages, images[], temperature, max_tokens, seed} -> {text}
//! POST /v1/token_loss  {image?, context, target}                           -> {sum_nll, token_count}
//! POST /v1/embed       {texts[]}                                           -> {vectors[][]}
//! ```
//!
//! Errors come back as `{"error": <code>, "message": ...}` with a 4xx/5xx status.
//! The codes `EmptyTarget` and `ImageUnsupported` map onto the matching
//! [`ProviderError`] variants.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    check_embeddings, ChatProvider, EmbedProvider, GenParams, LossProvider, LossRequest, LossResult,
    ProviderConfig, ProviderError,
};
use crate::prompt::{Message, PromptBundle};
use crate::record::ImageRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequestBody {
    pub messages: Vec<Message>,
    pub images: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponseBody {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLossBody {
    #[serde(default)]
    pub image: Option<ImageRef>,
    pub context: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLossResponseBody {
    pub sum_nll: f64,
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedBody {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponseBody {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub message: String,
}

/// Spaces requests at least `1 / rate` seconds apart. Shared by all threads using a client.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_sec: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / requests_per_sec),
            next: Mutex::new(None),
        }
    }

    /// Blocks until the caller's slot arrives.
    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Default)]
pub struct RetryStats {
    requests: AtomicU64,
    retries: AtomicU64,
}

impl RetryStats {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }
}

enum Attempt<T> {
    Done(T),
    Retry(ProviderError),
    Fail(ProviderError),
}

pub struct HttpProvider {
    config: ProviderConfig,
    agent: ureq::Agent,
    token: Option<String>,
    limiter: RateLimiter,
    stats: RetryStats,
}

impl HttpProvider {
    /// Builds a client. The bearer token, if configured, is read from the environment now.
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate().map_err(ProviderError::Auth)?;
        let token = match &config.auth_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ProviderError::Auth(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            limiter: RateLimiter::new(config.rate_limit),
            config,
            agent,
            token,
            stats: RetryStats::default(),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn stats(&self) -> &RetryStats {
        &self.stats
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn attempt<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Attempt<R> {
        self.limiter.acquire();
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(url);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(ProviderError::Timeout),
            Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound)) => {
                return Attempt::Retry(ProviderError::Transport(e.to_string()))
            }
            Err(e) => return Attempt::Fail(ProviderError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(ProviderError::Timeout),
            Err(e) => return Attempt::Fail(ProviderError::Transport(e.to_string())),
        };
        if (200..300).contains(&status) {
            return match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(ProviderError::Decode(e.to_string())),
            };
        }
        if let Ok(err) = serde_json::from_str::<ErrorBody>(&text) {
            match err.error.as_str() {
                "EmptyTarget" => return Attempt::Fail(ProviderError::EmptyTarget),
                "ImageUnsupported" => return Attempt::Fail(ProviderError::ImageUnsupported),
                _ => {}
            }
        }
        let error = ProviderError::Http { status, body: text };
        match status {
            429 | 500 | 502 | 503 | 504 => Attempt::Retry(error),
            _ => Attempt::Fail(error),
        }
    }

    /// POSTs `body`, retrying transient failures with exponential backoff.
    pub fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ProviderError> {
        let url = self.url(path);
        let mut retries = 0u32;
        loop {
            match self.attempt(&url, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    if retries >= self.config.max_retries {
                        return Err(match e {
                            ProviderError::Http { status: 429, .. } => ProviderError::RateLimited { retries },
                            other => other,
                        });
                    }
                    let delay = self.config.backoff_ms.saturating_mul(1u64 << retries.min(16));
                    log::debug!("retrying {url} after {delay} ms: {e}");
                    std::thread::sleep(Duration::from_millis(delay.min(30_000)));
                    retries += 1;
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }
}

impl ChatProvider for HttpProvider {
    fn provider_id(&self) -> &str {
        &self.config.model_id
    }

    fn chat_complete(&self, bundle: &PromptBundle, gen: &GenParams) -> Result<String, ProviderError> {
        let images = if bundle.messages.iter().any(|m| m.image_attached) {
            vec![bundle.image.uri.clone()]
        } else {
            Vec::new()
        };
        let body = ChatRequestBody {
            messages: bundle.messages.clone(),
            images,
            temperature: gen.temperature,
            max_tokens: gen.max_tokens,
            seed: gen.seed,
        };
        let resp: ChatResponseBody = self.post("/v1/chat", &body)?;
        Ok(resp.text)
    }
}

impl LossProvider for HttpProvider {
    fn provider_id(&self) -> &str {
        &self.config.model_id
    }

    fn supports_images(&self) -> bool {
        // The server reports ImageUnsupported per request.
        true
    }

    fn token_loss(&self, req: &LossRequest) -> Result<LossResult, ProviderError> {
        if req.target.trim().is_empty() {
            return Err(ProviderError::EmptyTarget);
        }
        let body = TokenLossBody {
            image: req.image.clone(),
            context: req.context.clone(),
            target: req.target.clone(),
        };
        let resp: TokenLossResponseBody = self.post("/v1/token_loss", &body)?;
        if !(resp.sum_nll >= 0.0 && resp.sum_nll.is_finite()) || resp.token_count == 0 {
            return Err(ProviderError::Decode(format!(
                "invalid loss response: sum_nll={}, token_count={}",
                resp.sum_nll, resp.token_count
            )));
        }
        Ok(LossResult {
            sum_nll: resp.sum_nll,
            token_count: resp.token_count,
            provider_id: self.config.model_id.clone(),
        })
    }
}

impl EmbedProvider for HttpProvider {
    fn provider_id(&self) -> &str {
        &self.config.model_id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let resp: EmbedResponseBody = self.post("/v1/embed", &EmbedBody { texts: texts.to_vec() })?;
        check_embeddings(texts.len(), &resp.vectors)?;
        Ok(resp.vectors)
    }
}
