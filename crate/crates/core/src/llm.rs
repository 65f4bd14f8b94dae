//! Chat-completion and embedding backends.
//!
//! Two interchangeable implementations of each trait exist: an HTTP client
//! speaking the common `/chat/completions` + `/embeddings` JSON protocol, and
//! a deterministic offline mock. Decorators add call recording and a shared
//! token-bucket rate limit.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no scripted response for transcript key {key}")]
    MissingScript { key: String },
    #[error("embedding request with no input texts")]
    EmptyInput,
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid embedding: {0}")]
    InvalidVector(String),
    #[error("environment variable `{0}` holding the api key is not set")]
    MissingApiKey(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl LlmError {
    /// Whether retrying the same request may succeed.
    pub fn is_retriable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit length. Rejects empty, non-finite and zero vectors.
    pub fn normalized(values: Vec<f64>) -> Result<Self, LlmError> {
        if values.is_empty() {
            return Err(LlmError::InvalidVector("zero dimension".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LlmError::InvalidVector("non-finite component".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LlmError::InvalidVector("zero vector".into()));
        }
        Ok(Embedding(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that must already be unit-norm (within 1e-9).
    pub fn from_unit(values: Vec<f64>) -> Result<Self, LlmError> {
        let e = Embedding(values);
        if e.0.is_empty() || e.0.iter().any(|v| !v.is_finite()) {
            return Err(LlmError::InvalidVector("empty or non-finite".into()));
        }
        let n = e.norm();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(LlmError::InvalidVector(format!("norm {n} is not 1")));
        }
        Ok(e)
    }

    /// Renormalized mean of `vectors`; `None` for an empty slice or a zero mean.
    pub fn mean(vectors: &[Embedding]) -> Option<Embedding> {
        let first = vectors.first()?;
        let mut acc = vec![0.0; first.dimension()];
        for v in vectors {
            for (a, x) in acc.iter_mut().zip(&v.0) {
                *a += x;
            }
        }
        Embedding::normalized(acc).ok()
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity, which for unit vectors is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, system_text: &str, user_text: &str) -> Result<String, LlmError>;

    /// Short tag identifying the model in telemetry.
    fn model_tag(&self) -> &str {
        "unknown"
    }
}

pub trait Embedder: Send + Sync {
    /// One unit-norm vector per input, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError>;

    fn embed_one(&self, text: &str) -> Result<Embedding, LlmError> {
        self.embed(&[text.to_string()])
            .map(|mut v| v.pop().expect("one vector per input"))
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn chat(&self, s: &str, u: &str) -> Result<String, LlmError> {
        (**self).chat(s, u)
    }
    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError> {
        (**self).embed(texts)
    }
}

/// One recorded chat call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_text: String,
    pub user_text: String,
    pub response_text: String,
    pub model_tag: String,
}

/// Stable transcript key for a `(system, user)` pair: hex SHA-256 over the
/// little-endian byte length of `system`, then `system`, then `user`.
pub fn transcript_key(system_text: &str, user_text: &str) -> String {
    let mut h = Sha256::new();
    h.update((system_text.len() as u64).to_le_bytes());
    h.update(system_text.as_bytes());
    h.update(user_text.as_bytes());
    hex::encode(h.finalize())
}

/// Replays scripted responses keyed by [`transcript_key`].
#[derive(Debug, Clone, Default)]
pub struct MockChat {
    script: HashMap<String, String>,
    fallback: Option<String>,
}

impl MockChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = Some(fallback.into());
        self
    }

    pub fn script(mut self, system_text: &str, user_text: &str, response: impl Into<String>) -> Self {
        self.script
            .insert(transcript_key(system_text, user_text), response.into());
        self
    }

    /// Loads a JSON object mapping transcript keys to responses.
    pub fn from_transcript_file(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)?;
        let script: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        Ok(MockChat {
            script,
            fallback: None,
        })
    }
}

impl ChatBackend for MockChat {
    fn chat(&self, system_text: &str, user_text: &str) -> Result<String, LlmError> {
        let key = transcript_key(system_text, user_text);
        match self.script.get(&key).or(self.fallback.as_ref()) {
            Some(r) => Ok(r.clone()),
            None => Err(LlmError::MissingScript { key }),
        }
    }

    fn model_tag(&self) -> &str {
        "mock"
    }
}

/// Chat backend driven by a closure; handy for oracle generators in tests.
pub struct FnChat<F>(pub F);

impl<F> ChatBackend for FnChat<F>
where
    F: Fn(&str, &str) -> Result<String, LlmError> + Send + Sync,
{
    fn chat(&self, s: &str, u: &str) -> Result<String, LlmError> {
        (self.0)(s, u)
    }

    fn model_tag(&self) -> &str {
        "fn"
    }
}

/// Deterministic offline embedder.
///
/// Texts found in the fixture table map to their (normalized) table vector;
/// all other texts map to a pseudo-random unit vector seeded by a hash of the
/// text bytes.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dimension: usize,
    table: HashMap<String, Embedding>,
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        MockEmbedder {
            dimension,
            table: HashMap::new(),
        }
    }

    pub fn with_vector(mut self, text: impl Into<String>, values: Vec<f64>) -> Result<Self, LlmError> {
        if values.len() != self.dimension {
            return Err(LlmError::InvalidVector(format!(
                "fixture vector has dimension {}, expected {}",
                values.len(),
                self.dimension
            )));
        }
        self.table.insert(text.into(), Embedding::normalized(values)?);
        Ok(self)
    }

    /// Loads a JSON object mapping text to vector; the table fixes the dimension.
    pub fn from_table_file(path: impl AsRef<Path>, fallback_dimension: usize) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)?;
        let raw: HashMap<String, Vec<f64>> =
            serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        let dimension = raw.values().next().map_or(fallback_dimension, Vec::len);
        raw.into_iter()
            .try_fold(MockEmbedder::new(dimension), |m, (k, v)| m.with_vector(k, v))
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn pseudo_random(&self, text: &str) -> Embedding {
        let digest = Sha256::digest(text.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        loop {
            let values: Vec<f64> = (0..self.dimension)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            if let Ok(e) = Embedding::normalized(values) {
                return e;
            }
        }
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::EmptyInput);
        }
        Ok(texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| self.pseudo_random(t))
            })
            .collect())
    }
}

/// Connection settings for a live backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub chat_path: String,
    pub embed_path: String,
    pub chat_model: String,
    pub embed_model: String,
    /// Name of the environment variable holding the API key; empty for none.
    pub api_key_env: String,
    pub auth_header: String,
    pub timeout_secs: u64,
    pub temperature: f64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            chat_path: "/chat/completions".into(),
            embed_path: "/embeddings".into(),
            chat_model: "gpt-4o".into(),
            embed_model: "text-embedding-3-small".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            auth_header: "Authorization".into(),
            timeout_secs: 120,
            temperature: 0.0,
        }
    }
}

struct HttpTransport {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpTransport { config, client })
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value, LlmError> {
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        let mut req = self.client.post(url).json(body);
        if !self.config.api_key_env.is_empty() {
            let key = std::env::var(&self.config.api_key_env)
                .map_err(|_| LlmError::MissingApiKey(self.config.api_key_env.clone()))?;
            req = req.header(self.config.auth_header.as_str(), format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))
    }
}

/// Live chat-completion client.
pub struct HttpChat {
    transport: HttpTransport,
}

impl HttpChat {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        Ok(HttpChat {
            transport: HttpTransport::new(config)?,
        })
    }
}

impl ChatBackend for HttpChat {
    fn chat(&self, system_text: &str, user_text: &str) -> Result<String, LlmError> {
        let cfg = &self.transport.config;
        let body = serde_json::json!({
            "model": cfg.chat_model,
            "temperature": cfg.temperature,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
        });
        let v = self.transport.post(&cfg.chat_path, &body)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))?;
        if text.is_empty() {
            return Err(LlmError::Malformed("empty completion".into()));
        }
        Ok(text.to_string())
    }

    fn model_tag(&self) -> &str {
        &self.transport.config.chat_model
    }
}

/// Live embedding client; vectors are renormalized on receipt.
pub struct HttpEmbedder {
    transport: HttpTransport,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        Ok(HttpEmbedder {
            transport: HttpTransport::new(config)?,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::EmptyInput);
        }
        let cfg = &self.transport.config;
        let body = serde_json::json!({"model": cfg.embed_model, "input": texts});
        let v = self.transport.post(&cfg.embed_path, &body)?;
        let mut resp: EmbeddingResponse =
            serde_json::from_value(v).map_err(|e| LlmError::Malformed(e.to_string()))?;
        if resp.data.len() != texts.len() {
            return Err(LlmError::Malformed(format!(
                "{} vectors for {} inputs",
                resp.data.len(),
                texts.len()
            )));
        }
        if resp.data.iter().all(|d| d.index.is_some()) {
            resp.data.sort_by_key(|d| d.index);
        }
        let out: Vec<Embedding> = resp
            .data
            .into_iter()
            .map(|d| Embedding::normalized(d.embedding))
            .collect::<Result<_, _>>()?;
        if out.windows(2).any(|w| w[0].dimension() != w[1].dimension()) {
            return Err(LlmError::Malformed("inconsistent embedding dimensions".into()));
        }
        Ok(out)
    }
}

/// Records every successful chat exchange.
pub struct RecordingChat<B> {
    inner: B,
    log: Mutex<Vec<ChatExchange>>,
}

impl<B: ChatBackend> RecordingChat<B> {
    pub fn new(inner: B) -> Self {
        RecordingChat {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<ChatExchange> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("log lock").clear();
    }
}

impl<B: ChatBackend> ChatBackend for RecordingChat<B> {
    fn chat(&self, system_text: &str, user_text: &str) -> Result<String, LlmError> {
        let response_text = self.inner.chat(system_text, user_text)?;
        self.log.lock().expect("log lock").push(ChatExchange {
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            response_text: response_text.clone(),
            model_tag: self.inner.model_tag().to_string(),
        });
        Ok(response_text)
    }

    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }
}

/// Token bucket shared by every rate-limited backend that holds a clone.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Arc<Self> {
        assert!(capacity > 0 && per_second > 0.0);
        Arc::new(TokenBucket {
            capacity: capacity as f64,
            per_second,
            state: Mutex::new((capacity as f64, Instant::now())),
        })
    }

    /// Blocks until a token is available, then takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_second;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

pub struct RateLimited<B> {
    inner: B,
    bucket: Arc<TokenBucket>,
}

impl<B> RateLimited<B> {
    pub fn new(inner: B, bucket: Arc<TokenBucket>) -> Self {
        RateLimited { inner, bucket }
    }
}

impl<B: ChatBackend> ChatBackend for RateLimited<B> {
    fn chat(&self, s: &str, u: &str) -> Result<String, LlmError> {
        self.bucket.acquire();
        self.inner.chat(s, u)
    }

    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }
}

impl<B: Embedder> Embedder for RateLimited<B> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, LlmError> {
        self.bucket.acquire();
        self.inner.embed(texts)
    }
}
