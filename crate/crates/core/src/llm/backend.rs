use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChatMessage, ChatRequest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection resets, 408/429/5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("auth: {0}")]
    Auth(String),
    #[error("{0}")]
    Fatal(String),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

/// Closure-backed backend for tests and replay.
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnBackend { name: name.into(), f }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (self.f)(request)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

/// OpenAI-compatible `POST {base}/chat/completions`.
pub struct OpenAiBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    /// `base` is the API root including the version segment, e.g. `https://host/v1`.
    pub fn new(base: &str, api_key: Option<String>) -> Self {
        Self::with_timeout(base, api_key, Duration::from_secs(300))
    }

    pub fn with_timeout(base: &str, api_key: Option<String>, timeout: Duration) -> Self {
        OpenAiBackend {
            endpoint: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client builds"),
        }
    }

    /// Reads `LLM_API_BASE` and `LLM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let base = std::env::var("LLM_API_BASE").ok()?;
        Some(Self::new(&base, std::env::var("LLM_API_KEY").ok()))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Backend for OpenAiBackend {
    fn name(&self) -> &str {
        "openai-compatible"
    }

    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut req = self.client.post(&self.endpoint).json(&WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.text().unwrap_or_default();
            let msg = format!("HTTP {status}: {}", body.chars().take(500).collect::<String>());
            return Err(match status {
                401 | 403 => BackendError::Auth(msg),
                408 | 409 | 429 | 500..=599 => BackendError::Transient(msg),
                _ => BackendError::Fatal(msg),
            });
        }
        let parsed: WireResponse = resp
            .json()
            .map_err(|e| BackendError::Fatal(format!("malformed completion body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| BackendError::Fatal("completion has no choices".into()))
    }
}
