//! External model contract: text embedder, visual-side query embedder and
//! chat completer, with logical-call accounting.
//!
//! Nothing outside this module names a concrete model. [`Providers`] wraps
//! the three backends, checks template registration, applies the retry
//! policy and records one ledger entry per logical call.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::mock::{HashEmbedder, ScriptRule, ScriptedChat};

pub const DEFAULT_TEXT_DIM: usize = 2560;
pub const DEFAULT_VISUAL_DIM: usize = 3584;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub chat_url: String,
    pub embed_url: String,
    pub visual_url: String,
    /// Name of the env var holding the bearer token.
    pub auth_env: String,
    pub chat_model: String,
    pub embed_model: String,
    pub visual_model: String,
    pub timeout_secs: u64,
    /// Extra attempts after the first failure of one logical call.
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// Token-bucket refill rate; 0 disables rate limiting.
    pub requests_per_sec: f64,
    pub burst: u32,
    pub text_dim: usize,
    pub visual_dim: usize,
    /// Seed of the hash embedders used in mock mode.
    pub mock_seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            chat_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            embed_url: "http://127.0.0.1:8000/v1/embeddings".into(),
            visual_url: "http://127.0.0.1:8001/v1/embeddings".into(),
            auth_env: "MMG_API_KEY".into(),
            chat_model: "chat".into(),
            embed_model: "text-embedding".into(),
            visual_model: "visual-embedding".into(),
            timeout_secs: 120,
            max_retries: 3,
            backoff_ms: 500,
            requests_per_sec: 0.0,
            burst: 4,
            text_dim: DEFAULT_TEXT_DIM,
            visual_dim: DEFAULT_VISUAL_DIM,
            mock_seed: 0,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.text_dim == 0 || self.visual_dim == 0 {
            return Err(ProviderError::Config("embedding dimensions must be positive".into()));
        }
        if self.max_retries > 20 {
            return Err(ProviderError::Config("max_retries must be at most 20".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("template {0} is not registered")]
    UnregisteredTemplate(String),
    #[error("empty embedding batch")]
    EmptyBatch,
    #[error("batch {batch}: {message}")]
    Transport { batch: usize, message: String },
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Response(String),
    #[error("expected dimension {expected}, provider returned {found}")]
    Dimension { expected: usize, found: usize },
    #[error("no scripted reply for template {0}")]
    NoScript(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("provider config: {0}")]
    Config(String),
}

/// One chat completion request. `template` names the prompt it carries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template: String,
    pub system: String,
    pub user: String,
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Text-side encoder into the visual embedding space.
pub trait VisualEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_query_visual(&self, text: &str) -> Result<Vec<f32>, ProviderError>;
}

/// Chat completion at temperature 0. Returns raw text.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

pub mod stage {
    pub const AGGREGATE: &str = "aggregate";
    pub const OPENIE: &str = "openie";
    pub const CONSOLIDATE: &str = "consolidate";
    pub const TOPIC_CHAIN: &str = "topic_chain";
    pub const EVENT_STEP1: &str = "event_step1";
    pub const EVENT_STEP2: &str = "event_step2";
    pub const EVENT_STEP3: &str = "event_step3";
    pub const REPAIR: &str = "repair";
    pub const CACHE_HIT: &str = "cache_hit";
    pub const CONTROLLER: &str = "controller";
    pub const ANSWER: &str = "answer";
    pub const EMBED_TEXT: &str = "embed_text";
    pub const EMBED_VISUAL: &str = "embed_visual";
}

/// Per-stage counters of logical provider calls.
#[derive(Debug, Default)]
pub struct CallLedger {
    counts: Mutex<BTreeMap<String, u64>>,
}

impl CallLedger {
    pub fn record(&self, stage: &str) {
        *self.counts.lock().expect("ledger lock").entry(stage.to_string()).or_insert(0) += 1;
    }

    pub fn get(&self, stage: &str) -> u64 {
        self.counts.lock().expect("ledger lock").get(stage).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        self.counts.lock().expect("ledger lock").clone()
    }

    pub fn reset(&self) {
        self.counts.lock().expect("ledger lock").clear();
    }
}

/// Counter-wise difference `after - before`, dropping zeros.
pub fn ledger_delta(before: &BTreeMap<String, u64>, after: &BTreeMap<String, u64>) -> BTreeMap<String, u64> {
    after
        .iter()
        .filter_map(|(k, &v)| {
            let d = v - before.get(k).copied().unwrap_or(0);
            (d > 0).then(|| (k.clone(), d))
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_retries: 0, backoff: Duration::ZERO }
    }

    /// Runs `f` until it succeeds or the attempts run out.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut attempt = 0;
        loop {
            match f() {
                Ok(v) => return Ok(v),
                Err(e @ (ProviderError::UnregisteredTemplate(_) | ProviderError::EmptyBatch)) => return Err(e),
                Err(e) if attempt >= self.max_retries => return Err(e),
                Err(e) => {
                    log::warn!("provider attempt {} failed: {e}", attempt + 1);
                    attempt += 1;
                    if !self.backoff.is_zero() {
                        std::thread::sleep(self.backoff * attempt);
                    }
                }
            }
        }
    }
}

/// The three backends plus registration, retries and the call ledger.
pub struct Providers {
    text: Box<dyn TextEmbedder>,
    visual: Box<dyn VisualEmbedder>,
    chat: Box<dyn ChatProvider>,
    templates: BTreeSet<String>,
    retry: RetryPolicy,
    pub ledger: CallLedger,
}

impl Providers {
    pub fn new(
        text: Box<dyn TextEmbedder>,
        visual: Box<dyn VisualEmbedder>,
        chat: Box<dyn ChatProvider>,
        retry: RetryPolicy,
    ) -> Self {
        Providers { text, visual, chat, templates: BTreeSet::new(), retry, ledger: CallLedger::default() }
    }

    /// Hash embedders and a scripted chat with heuristic fallbacks.
    pub fn mock(config: &ProviderConfig, script: Vec<ScriptRule>) -> Self {
        Self::new(
            Box::new(HashEmbedder::text(config.text_dim, config.mock_seed)),
            Box::new(HashEmbedder::visual(config.visual_dim, config.mock_seed)),
            Box::new(ScriptedChat::new(script)),
            RetryPolicy { max_retries: config.max_retries, backoff: Duration::ZERO },
        )
    }

    /// JSON-over-HTTP adapters reading the bearer token from `auth_env`.
    pub fn http(config: &ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let client = HttpClient::new(config);
        Ok(Self::new(
            Box::new(HttpEmbedder { client: client.clone(), url: config.embed_url.clone(), model: config.embed_model.clone(), dim: config.text_dim }),
            Box::new(HttpEmbedder { client: client.clone(), url: config.visual_url.clone(), model: config.visual_model.clone(), dim: config.visual_dim }),
            Box::new(HttpChat { client, url: config.chat_url.clone(), model: config.chat_model.clone() }),
            RetryPolicy { max_retries: config.max_retries, backoff: Duration::from_millis(config.backoff_ms) },
        ))
    }

    pub fn register_templates<'a>(&mut self, names: impl IntoIterator<Item = &'a str>) {
        self.templates.extend(names.into_iter().map(str::to_string));
    }

    pub fn text_dim(&self) -> usize {
        self.text.dim()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.dim()
    }

    /// One logical chat call charged to `stage`; retries are not counted.
    pub fn chat(&self, stage: &str, request: &ChatRequest) -> Result<String, ProviderError> {
        if !self.templates.contains(&request.template) {
            return Err(ProviderError::UnregisteredTemplate(request.template.clone()));
        }
        self.ledger.record(stage);
        self.retry.run(|| self.chat.complete(request))
    }

    pub fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyBatch);
        }
        self.ledger.record(stage::EMBED_TEXT);
        let out = self.retry.run(|| self.text.embed_text(texts))?;
        if out.len() != texts.len() {
            return Err(ProviderError::Response(format!("{} vectors for {} inputs", out.len(), texts.len())));
        }
        for v in &out {
            if v.len() != self.text.dim() {
                return Err(ProviderError::Dimension { expected: self.text.dim(), found: v.len() });
            }
        }
        Ok(out)
    }

    /// Embeds in batches of `batch`; errors name the failing batch.
    pub fn embed_text_batched(&self, texts: &[String], batch: usize) -> Result<Vec<Vec<f32>>, ProviderError> {
        let mut out = Vec::with_capacity(texts.len());
        for (i, chunk) in texts.chunks(batch.max(1)).enumerate() {
            match self.embed_text(chunk) {
                Ok(v) => out.extend(v),
                Err(ProviderError::Transport { message, .. }) => {
                    return Err(ProviderError::Transport { batch: i, message })
                }
                Err(e) => return Err(ProviderError::Transport { batch: i, message: e.to_string() }),
            }
        }
        Ok(out)
    }

    pub fn embed_query_visual(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        self.ledger.record(stage::EMBED_VISUAL);
        let v = self.retry.run(|| self.visual.embed_query_visual(text))?;
        if v.len() != self.visual.dim() {
            return Err(ProviderError::Dimension { expected: self.visual.dim(), found: v.len() });
        }
        Ok(v)
    }
}

/// Token bucket shared by all adapters of one client.
#[derive(Debug)]
struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn new(rate: f64, burst: u32) -> Self {
        let capacity = f64::from(burst.max(1));
        TokenBucket { rate, capacity, state: Mutex::new((capacity, Instant::now())) }
    }

    fn acquire(&self) {
        if self.rate <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut st = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                st.0 = (st.0 + now.duration_since(st.1).as_secs_f64() * self.rate).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.rate)
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Clone)]
struct HttpClient {
    agent: ureq::Agent,
    token: Option<String>,
    bucket: std::sync::Arc<TokenBucket>,
}

impl HttpClient {
    fn new(config: &ProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpClient {
            agent,
            token: std::env::var(&config.auth_env).ok().filter(|t| !t.is_empty()),
            bucket: std::sync::Arc::new(TokenBucket::new(config.requests_per_sec, config.burst)),
        }
    }

    fn post(&self, url: &str, body: &serde_json::Value) -> Result<serde_json::Value, ProviderError> {
        self.bucket.acquire();
        let mut req = self.agent.post(url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ProviderError::Transport { batch: 0, message: e.to_string() })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport { batch: 0, message: e.to_string() })?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Response(e.to_string()))
    }
}

struct HttpChat {
    client: HttpClient,
    url: String,
    model: String,
}

impl ChatProvider for HttpChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let mut messages = Vec::new();
        if !request.system.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": request.system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user}));
        let body = serde_json::json!({"model": self.model, "messages": messages, "temperature": 0});
        let v = self.client.post(&self.url, &body)?;
        v.pointer("/choices/0/message/content")
            .or_else(|| v.get("text"))
            .or_else(|| v.get("output"))
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Response("no completion text".into()))
    }
}

struct HttpEmbedder {
    client: HttpClient,
    url: String,
    model: String,
    dim: usize,
}

fn parse_vectors(v: &serde_json::Value) -> Result<Vec<Vec<f32>>, ProviderError> {
    let rows: Vec<&serde_json::Value> = if let Some(data) = v.get("data").and_then(|d| d.as_array()) {
        data.iter().map(|d| d.get("embedding").unwrap_or(d)).collect()
    } else if let Some(e) = v.get("embeddings").and_then(|d| d.as_array()) {
        e.iter().collect()
    } else {
        return Err(ProviderError::Response("no data or embeddings field".into()));
    };
    rows.into_iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| ProviderError::Response("embedding is not an array".into()))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32).ok_or_else(|| ProviderError::Response("non-numeric".into())))
                .collect()
        })
        .collect()
}

impl HttpEmbedder {
    fn call(&self, input: serde_json::Value) -> Result<Vec<Vec<f32>>, ProviderError> {
        let body = serde_json::json!({"model": self.model, "input": input});
        parse_vectors(&self.client.post(&self.url, &body)?)
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.call(serde_json::json!(texts))
    }
}

impl VisualEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_query_visual(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        self.call(serde_json::json!([text]))?
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::Response("empty embedding list".into()))
    }
}
