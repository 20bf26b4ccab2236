//! Chat-completion gateway: one entry point over remote and mock backends
//! with content-addressed response caching, bounded retries, a global call
//! budget and a parallelism bound.

mod backend;
mod cache;
mod mock;
mod parse;
mod simulated;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use backend::{Backend, BackendError, FnBackend, OpenAiBackend};
pub use cache::ResponseCache;
pub use mock::{Matcher, MockReply, MockRule, MockScript, ScriptedBackend};
pub use parse::{parse_entities, DroppedItem, ParseOptions, ParsedExtraction, RepairStep};
pub use simulated::SimulatedAgents;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Provenance label; excluded from the cache key.
    #[serde(default)]
    pub request_tag: String,
}

#[derive(Serialize)]
struct CacheKeyView<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: None,
            request_tag: String::new(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.request_tag = tag.into();
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = Some(max_tokens);
        self
    }

    /// SHA-256 over model, messages, temperature and max_tokens.
    pub fn cache_key(&self) -> String {
        let view = CacheKeyView {
            model: &self.model,
            messages: &self.messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        let canonical = serde_json::to_vec(&view).expect("requests serialize");
        hex::encode(Sha256::digest(&canonical))
    }

    /// All message contents joined by newlines, for matching.
    pub fn content(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("call budget of {limit} exhausted")]
    BudgetExceeded { limit: usize },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("response cache: {0}")]
    Cache(String),
}

impl GatewayError {
    /// Errors that must abort a whole run rather than a single sample.
    pub fn is_fatal(&self) -> bool {
        matches!(self, GatewayError::Auth(_) | GatewayError::BudgetExceeded { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        RetryPolicy {
            base_delay_ms: 0,
            max_delay_ms: 0,
            ..Self::default()
        }
    }

    fn delay(&self, retry: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub retries: usize,
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: ResponseCache,
    retry: RetryPolicy,
    budget: Option<usize>,
    calls: AtomicUsize,
    cache_hits: AtomicUsize,
    retries: AtomicUsize,
    permits: Permits,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            cache: ResponseCache::in_memory(),
            retry: RetryPolicy::default(),
            budget: None,
            calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            retries: AtomicUsize::new(0),
            permits: Permits {
                free: Mutex::new(4),
                cv: Condvar::new(),
            },
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Maximum number of backend calls; cache hits are free.
    pub fn with_budget(mut self, max_calls: Option<usize>) -> Self {
        self.budget = max_calls;
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.permits = Permits {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        };
        self
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    fn reserve_call(&self) -> Result<(), GatewayError> {
        match self.budget {
            None => {
                self.calls.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Some(limit) => self
                .calls
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| (c < limit).then_some(c + 1))
                .map(|_| ())
                .map_err(|_| GatewayError::BudgetExceeded { limit }),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let key = request.cache_key();
        if let Some(hit) = self.cache.get(&key).map_err(GatewayError::Cache)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let _permit = self.permits.acquire();
        let mut attempt = 0u32;
        loop {
            self.reserve_call()?;
            match self.backend.send(request) {
                Ok(text) => {
                    self.cache
                        .put(&key, request, &text)
                        .map_err(GatewayError::Cache)?;
                    return Ok(text);
                }
                Err(BackendError::Auth(m)) => return Err(GatewayError::Auth(m)),
                Err(BackendError::Fatal(m)) => return Err(GatewayError::Backend(m)),
                Err(BackendError::Transient(m)) => {
                    if attempt >= self.retry.max_retries {
                        return Err(GatewayError::Transport {
                            attempts: attempt + 1,
                            message: m,
                        });
                    }
                    log::warn!("transient backend error (attempt {}): {m}", attempt + 1);
                    std::thread::sleep(self.retry.delay(attempt));
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    attempt += 1;
                }
            }
        }
    }

    /// Completes independent requests concurrently, bounded by the gateway's
    /// parallelism. Results keep input order.
    pub fn complete_many(&self, requests: &[ChatRequest]) -> Vec<Result<String, GatewayError>> {
        let workers = (*self.permits.free.lock().expect("permit lock")).clamp(1, requests.len().max(1));
        if workers <= 1 {
            return requests.iter().map(|r| self.complete(r)).collect();
        }
        let next = AtomicUsize::new(0);
        let mut out: Vec<Option<Result<String, GatewayError>>> = vec![None; requests.len()];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    let next = &next;
                    s.spawn(move || {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            if i >= requests.len() {
                                break;
                            }
                            done.push((i, self.complete(&requests[i])));
                        }
                        done
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("gateway worker panicked") {
                    out[i] = Some(r);
                }
            }
        });
        out.into_iter().map(|r| r.expect("every request ran")).collect()
    }
}

/// Model ids per agent role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelRoles {
    pub executor: String,
    pub reflector: String,
    pub editor: String,
    pub strategist: String,
    pub guideline_writer: String,
    pub embedder: String,
}

impl Default for ModelRoles {
    fn default() -> Self {
        ModelRoles {
            executor: "qwen3-32b".into(),
            reflector: "qwen3-32b".into(),
            editor: "qwen3-32b".into(),
            strategist: "qwen3-32b".into(),
            guideline_writer: "qwen3-32b".into(),
            embedder: "text-embedding-3-large".into(),
        }
    }
}

/// A gateway bound to one model id.
#[derive(Clone)]
pub struct Agent {
    gateway: Arc<Gateway>,
    model: String,
    temperature: f64,
}

impl Agent {
    pub fn new(gateway: Arc<Gateway>, model: impl Into<String>) -> Self {
        Agent {
            gateway,
            model: model.into(),
            temperature: 0.0,
        }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn request(&self, messages: Vec<ChatMessage>, tag: impl Into<String>) -> ChatRequest {
        let mut r = ChatRequest::new(self.model.clone(), messages).with_tag(tag);
        r.temperature = self.temperature;
        r
    }

    pub fn chat(&self, messages: Vec<ChatMessage>, tag: impl Into<String>) -> Result<String, GatewayError> {
        self.gateway.complete(&self.request(messages, tag))
    }
}

/// The agents a full pipeline talks to, all sharing one gateway.
#[derive(Clone)]
pub struct AgentSet {
    pub executor: Agent,
    pub reflector: Agent,
    pub editor: Agent,
    pub strategist: Agent,
    pub guideline_writer: Agent,
}

impl AgentSet {
    pub fn new(gateway: Arc<Gateway>, roles: &ModelRoles) -> Self {
        AgentSet {
            executor: Agent::new(gateway.clone(), &roles.executor),
            reflector: Agent::new(gateway.clone(), &roles.reflector),
            editor: Agent::new(gateway.clone(), &roles.editor),
            strategist: Agent::new(gateway.clone(), &roles.strategist),
            guideline_writer: Agent::new(gateway, &roles.guideline_writer),
        }
    }
}
