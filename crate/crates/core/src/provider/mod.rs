//! Gateway to chat-completion and embedding endpoints.
//!
//! [`Provider`] wraps a [`Backend`] (OpenAI-compatible HTTP, or the scripted
//! [`mock::MockBackend`]) with a response cache, bounded retries with
//! exponential backoff, and a per-endpoint in-flight limit. It is the only
//! concurrency boundary in the crate: every other module calls it from
//! whatever worker it happens to run on.

mod cache;
pub mod http;
pub mod mock;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::ResponseCache;

use crate::text::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Chat,
    Embedding,
}

fn default_max_in_flight() -> usize {
    4
}

fn default_batch_size() -> usize {
    32
}

/// One configured model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub id: String,
    pub base_url: String,
    pub model_name: String,
    pub kind: EndpointKind,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub temperature: f32,
    /// Texts per embeddings request.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl ModelEndpoint {
    pub fn chat(id: &str, base_url: &str, model_name: &str) -> Self {
        ModelEndpoint {
            id: id.into(),
            base_url: base_url.into(),
            model_name: model_name.into(),
            kind: EndpointKind::Chat,
            max_in_flight: default_max_in_flight(),
            temperature: 0.0,
            batch_size: default_batch_size(),
        }
    }

    pub fn embedding(id: &str, base_url: &str, model_name: &str) -> Self {
        ModelEndpoint {
            kind: EndpointKind::Embedding,
            ..ModelEndpoint::chat(id, base_url, model_name)
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.id.trim().is_empty() {
            return Err(ProviderError::InvalidEndpoint("empty endpoint id".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ProviderError::InvalidEndpoint(format!(
                "{}: max_in_flight must be at least 1",
                self.id
            )));
        }
        if self.batch_size == 0 {
            return Err(ProviderError::InvalidEndpoint(format!(
                "{}: batch_size must be at least 1",
                self.id
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ProviderError::InvalidEndpoint(format!(
                "{}: temperature must be a finite value >= 0",
                self.id
            )));
        }
        Ok(())
    }
}

/// Sampling parameters. `trial` and `attempt` are not sent on the wire; they
/// only separate cache entries so repeated trials and judge retries are real
/// calls rather than cache hits.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f32,
    #[serde(default)]
    pub trial: u32,
    #[serde(default)]
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub params: ChatParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_text: String,
    pub user_text: String,
    pub params: ChatParams,
    pub response_text: String,
    pub usage: Usage,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub dim: usize,
    pub source_text_hash: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>, source_text: &str) -> Self {
        EmbeddingVector {
            dim: values.len(),
            values,
            source_text_hash: sha256_hex(source_text),
        }
    }
}

/// Raw reply from a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("no scripted response matches: {0}")]
    Unscripted(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { code, .. } => *code == 429 || *code >= 500,
            BackendError::Unscripted(_) => false,
        }
    }
}

/// A model service. Implementations must be safe to call from many threads.
pub trait Backend: Send + Sync {
    fn chat(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<BackendReply, BackendError>;
    fn embed(&self, endpoint: &ModelEndpoint, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("TransportError: {endpoint} failed after {attempts} attempts: {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("ProviderRefusal: {endpoint} returned status {status}: {body}")]
    ProviderRefusal {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("EmptyResponse: {endpoint} returned no content")]
    EmptyResponse { endpoint: String },
    #[error("DimensionMismatch: expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in embedding from {endpoint}")]
    NonFiniteEmbedding { endpoint: String },
    #[error("endpoint {endpoint} is a {actual:?} endpoint, {expected:?} required")]
    WrongKind {
        endpoint: String,
        expected: EndpointKind,
        actual: EndpointKind,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("Unscripted: {0}")]
    Unscripted(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl ProviderError {
    pub fn name(&self) -> &'static str {
        match self {
            ProviderError::Transport { .. } => "TransportError",
            ProviderError::ProviderRefusal { .. } => "ProviderRefusal",
            ProviderError::EmptyResponse { .. } => "EmptyResponse",
            ProviderError::DimensionMismatch { .. } => "DimensionMismatch",
            ProviderError::NonFiniteEmbedding { .. } => "NonFiniteEmbedding",
            ProviderError::WrongKind { .. } => "WrongEndpointKind",
            ProviderError::EmptyInput(_) => "EmptyInput",
            ProviderError::InvalidEndpoint(_) => "InvalidEndpoint",
            ProviderError::Unscripted(_) => "Unscripted",
            ProviderError::Cache(_) => "CacheError",
        }
    }
}

/// Exponential backoff: the wait after failed attempt `n` (1-based) is
/// `initial * multiplier^(n-1)`, capped at `max_backoff`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn backoff_after(&self, failed_attempt: u32) -> Duration {
        let factor = self.multiplier.powi(failed_attempt.saturating_sub(1) as i32);
        let delay = self.initial_backoff.as_secs_f64() * factor;
        Duration::from_secs_f64(delay.min(self.max_backoff.as_secs_f64()))
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Counting semaphore enforcing an endpoint's `max_in_flight`.
struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Cached, rate-limited, retrying front for a [`Backend`].
pub struct Provider {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    limits: Mutex<HashMap<String, Arc<Semaphore>>>,
}

impl Provider {
    /// Provider with an in-memory cache and the default retry policy.
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Provider {
            backend,
            cache: Some(ResponseCache::in_memory()),
            retry: RetryPolicy::default(),
            sleeper: Arc::new(std::thread::sleep),
            limits: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        self.cache = Some(ResponseCache::on_disk(dir.into())?);
        Ok(self)
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    fn semaphore(&self, endpoint: &ModelEndpoint) -> Arc<Semaphore> {
        let mut limits = self.limits.lock().unwrap();
        limits
            .entry(endpoint.id.clone())
            .or_insert_with(|| Arc::new(Semaphore::new(endpoint.max_in_flight)))
            .clone()
    }

    fn with_retries<T>(
        &self,
        endpoint: &ModelEndpoint,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, ProviderError> {
        let semaphore = self.semaphore(endpoint);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = semaphore.acquire();
                call()
            };
            match result {
                Ok(v) => return Ok(v),
                Err(err) if err.is_transient() && attempt < self.retry.max_attempts => {
                    log::warn!("{}: attempt {attempt} failed ({err}); retrying", endpoint.id);
                    (self.sleeper)(self.retry.backoff_after(attempt));
                }
                Err(BackendError::Transport(message)) => {
                    return Err(ProviderError::Transport {
                        endpoint: endpoint.id.clone(),
                        attempts: attempt,
                        message,
                    })
                }
                Err(BackendError::Status { code, body }) => {
                    return Err(ProviderError::ProviderRefusal {
                        endpoint: endpoint.id.clone(),
                        status: code,
                        body,
                    })
                }
                Err(BackendError::Unscripted(text)) => return Err(ProviderError::Unscripted(text)),
            }
        }
    }

    /// One chat completion. Identical requests are served from the cache.
    pub fn chat(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<ChatExchange, ProviderError> {
        if endpoint.kind != EndpointKind::Chat {
            return Err(ProviderError::WrongKind {
                endpoint: endpoint.id.clone(),
                expected: EndpointKind::Chat,
                actual: endpoint.kind,
            });
        }
        if request.system_text.trim().is_empty() || request.user_text.trim().is_empty() {
            return Err(ProviderError::EmptyInput("chat texts must be non-empty".into()));
        }
        let key = cache::chat_key(endpoint, request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get_chat(&key)? {
                return Ok(ChatExchange {
                    system_text: request.system_text.clone(),
                    user_text: request.user_text.clone(),
                    params: request.params,
                    response_text: hit.text,
                    usage: hit.usage,
                    cache_hit: true,
                });
            }
        }
        let reply = self.with_retries(endpoint, || self.backend.chat(endpoint, request))?;
        if reply.text.trim().is_empty() {
            return Err(ProviderError::EmptyResponse {
                endpoint: endpoint.id.clone(),
            });
        }
        if let Some(cache) = &self.cache {
            cache.put_chat(&key, &reply)?;
        }
        Ok(ChatExchange {
            system_text: request.system_text.clone(),
            user_text: request.user_text.clone(),
            params: request.params,
            response_text: reply.text,
            usage: reply.usage,
            cache_hit: false,
        })
    }

    /// Convenience wrapper: chat with the endpoint's configured temperature.
    pub fn chat_text(
        &self,
        endpoint: &ModelEndpoint,
        system_text: &str,
        user_text: &str,
        trial: u32,
        attempt: u32,
    ) -> Result<ChatExchange, ProviderError> {
        let request = ChatRequest {
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            params: ChatParams {
                temperature: endpoint.temperature,
                trial,
                attempt,
            },
        };
        self.chat(endpoint, &request)
    }

    /// Embeds `texts`, one vector per input in input order. Uncached texts are
    /// sent in batches of `endpoint.batch_size`, at most `max_in_flight`
    /// batches at a time.
    pub fn embed(&self, endpoint: &ModelEndpoint, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if endpoint.kind != EndpointKind::Embedding {
            return Err(ProviderError::WrongKind {
                endpoint: endpoint.id.clone(),
                expected: EndpointKind::Embedding,
                actual: endpoint.kind,
            });
        }
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(ProviderError::EmptyInput(format!("text {i} is blank")));
        }

        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        let mut missing = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let cached = match &self.cache {
                Some(cache) => cache.get_embedding(&cache::embed_key(endpoint, text))?,
                None => None,
            };
            match cached {
                Some(v) => out[i] = Some(v),
                None => missing.push(i),
            }
        }

        // identical texts within one call are embedded once
        let mut unique: Vec<usize> = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for &i in &missing {
            seen.entry(texts[i].as_str()).or_insert_with(|| {
                unique.push(i);
                i
            });
        }

        let batches: Vec<Vec<usize>> = unique.chunks(endpoint.batch_size).map(|c| c.to_vec()).collect();
        type BatchResult = Option<Result<Vec<Vec<f32>>, ProviderError>>;
        let results: Mutex<Vec<BatchResult>> = Mutex::new(vec![None; batches.len()]);
        let next = std::sync::atomic::AtomicUsize::new(0);
        let workers = endpoint.max_in_flight.min(batches.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let b = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if b >= batches.len() {
                        break;
                    }
                    let batch_texts: Vec<String> = batches[b].iter().map(|&i| texts[i].clone()).collect();
                    let res = self
                        .with_retries(endpoint, || self.backend.embed(endpoint, &batch_texts))
                        .and_then(|vectors| {
                            if vectors.len() != batch_texts.len() {
                                return Err(ProviderError::DimensionMismatch {
                                    expected: batch_texts.len(),
                                    got: vectors.len(),
                                });
                            }
                            Ok(vectors)
                        });
                    results.lock().unwrap()[b] = Some(res);
                });
            }
        });

        let mut fresh: HashMap<&str, Vec<f32>> = HashMap::new();
        for (batch, res) in batches.iter().zip(results.into_inner().unwrap()) {
            let vectors = res.expect("every batch is processed")?;
            for (&i, v) in batch.iter().zip(vectors) {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(ProviderError::NonFiniteEmbedding {
                        endpoint: endpoint.id.clone(),
                    });
                }
                if let Some(cache) = &self.cache {
                    cache.put_embedding(&cache::embed_key(endpoint, &texts[i]), &v)?;
                }
                fresh.insert(texts[i].as_str(), v);
            }
        }
        for &i in &missing {
            out[i] = Some(fresh[texts[i].as_str()].clone());
        }

        let vectors: Vec<EmbeddingVector> = out
            .into_iter()
            .zip(texts)
            .map(|(v, t)| EmbeddingVector::new(v.expect("filled"), t))
            .collect();
        let dim = vectors[0].dim;
        if dim == 0 {
            return Err(ProviderError::DimensionMismatch { expected: 1, got: 0 });
        }
        if let Some(bad) = vectors.iter().find(|v| v.dim != dim) {
            return Err(ProviderError::DimensionMismatch {
                expected: dim,
                got: bad.dim,
            });
        }
        Ok(vectors)
    }
}

/// Dispatches to a backend chosen by endpoint id, with a fallback.
pub struct RoutingBackend {
    routes: HashMap<String, Arc<dyn Backend>>,
    fallback: Arc<dyn Backend>,
}

impl RoutingBackend {
    pub fn new(fallback: Arc<dyn Backend>) -> Self {
        RoutingBackend {
            routes: HashMap::new(),
            fallback,
        }
    }

    pub fn route(mut self, endpoint_id: &str, backend: Arc<dyn Backend>) -> Self {
        self.routes.insert(endpoint_id.to_string(), backend);
        self
    }

    fn pick(&self, endpoint: &ModelEndpoint) -> &dyn Backend {
        self.routes
            .get(&endpoint.id)
            .map(|b| b.as_ref())
            .unwrap_or(self.fallback.as_ref())
    }
}

impl Backend for RoutingBackend {
    fn chat(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        self.pick(endpoint).chat(endpoint, request)
    }

    fn embed(&self, endpoint: &ModelEndpoint, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.pick(endpoint).embed(endpoint, texts)
    }
}
