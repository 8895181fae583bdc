//! Gateway to chat, embedding and sentiment services.
//!
//! Every call goes through a content-addressed disk cache and a counting
//! semaphore that bounds concurrent backend requests. Two backends exist: an
//! HTTP client for OpenAI-compatible endpoints and a deterministic offline
//! mock.

mod cache;
pub mod mock;
mod remote;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use cache::DiskCache;
pub use mock::MockBackend;
pub use remote::{RemoteBackend, Transport, TransportReply, UreqTransport};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("service returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("empty completion")]
    EmptyCompletion,
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl GatewayError {
    /// Failures of the service itself rather than of one reply.
    pub fn is_systemic(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport { .. } | GatewayError::Status { .. } | GatewayError::Cache(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, GatewayError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseFormat {
    FreeText,
    JsonObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_payload: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub response_format: ResponseFormat,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.system_prompt.trim().is_empty() || self.user_payload.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompts must be non-empty".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SentimentScore(pub f64);

impl SentimentScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "mock" => Ok(BackendKind::Mock),
            other => Err(format!("unknown backend {other:?} (expected remote or mock)")),
        }
    }
}

/// Which default temperature a request uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Extraction, naming and judging.
    Judge,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: String,
    pub model_name: String,
    pub embedding_model: String,
    pub sentiment_model: String,
    pub cache_dir: Option<PathBuf>,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    pub embed_batch: usize,
    pub judge_temperature: f64,
    pub generation_temperature: f64,
    /// Mock only: seed for embeddings and fault selection.
    pub seed: u64,
    /// Mock only: fraction of chat payloads answered with non-JSON prose.
    pub mock_fault_rate: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            backend: BackendKind::Mock,
            base_url: "https://api.openai.com/v1".into(),
            api_key: String::new(),
            model_name: "gpt-4.1-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            sentiment_model: "sentiment".into(),
            cache_dir: None,
            max_retries: 3,
            request_timeout_secs: 60,
            retry_backoff_ms: 500,
            max_in_flight: 8,
            embed_batch: 64,
            judge_temperature: 0.0,
            generation_temperature: 0.7,
            seed: 0,
            mock_fault_rate: 0.0,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be >= 1".into());
        }
        if self.embed_batch == 0 {
            return Err("embed_batch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mock_fault_rate) {
            return Err("mock_fault_rate must be in [0, 1]".into());
        }
        if self.judge_temperature < 0.0 || self.generation_temperature < 0.0 {
            return Err("temperatures must be >= 0".into());
        }
        if self.backend == BackendKind::Remote && self.base_url.trim().is_empty() {
            return Err("base_url is required for the remote backend".into());
        }
        Ok(())
    }
}

/// A service that answers uncached requests.
pub trait Backend: Send + Sync {
    /// Distinguishes cache entries of different models or mock seeds.
    fn namespace(&self) -> String;
    fn chat(&self, request: &ChatRequest) -> Result<String>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
    fn sentiment(&self, text: &str) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub reprompts: u64,
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn run<R>(&self, f: impl FnOnce() -> R) -> R {
        {
            let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
            while *p == 0 {
                p = self.freed.wait(p).unwrap_or_else(|e| e.into_inner());
            }
            *p -= 1;
        }
        struct Release<'a>(&'a Semaphore);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
                self.0.freed.notify_one();
            }
        }
        let _guard = Release(self);
        f()
    }
}

pub struct Gateway {
    config: GatewayConfig,
    backend: Box<dyn Backend>,
    cache: Option<DiskCache>,
    limiter: Semaphore,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
    reprompts: AtomicU64,
    dimension: AtomicUsize,
}

const REPROMPT_SUFFIX: &str =
    "\n\nYour previous reply could not be parsed. Reply with a single JSON object and nothing else.";

impl Gateway {
    pub fn new(config: GatewayConfig, backend: Box<dyn Backend>) -> Result<Self> {
        config.validate().map_err(GatewayError::InvalidRequest)?;
        let cache = config.cache_dir.as_ref().map(DiskCache::new).transpose()?;
        Ok(Gateway {
            limiter: Semaphore::new(config.max_in_flight),
            config,
            backend,
            cache,
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            reprompts: AtomicU64::new(0),
            dimension: AtomicUsize::new(0),
        })
    }

    /// Builds the backend named in the config.
    pub fn from_config(config: GatewayConfig) -> Result<Self> {
        let backend: Box<dyn Backend> = match config.backend {
            BackendKind::Mock => Box::new(MockBackend::new(config.seed, config.mock_fault_rate)),
            BackendKind::Remote => Box::new(RemoteBackend::new(&config, Box::new(UreqTransport::new(
                Duration::from_secs(config.request_timeout_secs),
            )))),
        };
        Self::new(config, backend)
    }

    pub fn mock(seed: u64) -> Self {
        let config = GatewayConfig {
            seed,
            ..GatewayConfig::default()
        };
        Self::from_config(config).expect("default config is valid")
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            reprompts: self.reprompts.load(Ordering::SeqCst),
        }
    }

    pub fn default_temperature(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Judge => self.config.judge_temperature,
            TaskKind::Generation => self.config.generation_temperature,
        }
    }

    fn call_backend<R>(&self, f: impl FnOnce(&dyn Backend) -> Result<R>) -> Result<R> {
        self.limiter.run(|| {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            f(self.backend.as_ref())
        })
    }

    fn cached<R: Serialize + serde::de::DeserializeOwned>(
        &self,
        key: &Value,
        compute: impl FnOnce() -> Result<R>,
    ) -> Result<R> {
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.get(key)? {
                if let Ok(hit) = serde_json::from_value(v) {
                    self.cache_hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(hit);
                }
            }
        }
        let value = compute()?;
        if let Some(cache) = &self.cache {
            cache.put(key, &serde_json::to_value(&value).expect("cache value serializes"))?;
        }
        Ok(value)
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<String> {
        request.validate()?;
        let key = json!({
            "op": "chat",
            "namespace": self.backend.namespace(),
            "request": request,
        });
        self.cached(&key, || {
            let text = self.call_backend(|b| b.chat(request))?;
            if text.trim().is_empty() {
                return Err(GatewayError::EmptyCompletion);
            }
            Ok(text)
        })
    }

    /// Chat and parse a JSON object, re-prompting once on a malformed reply.
    pub fn chat_json(&self, request: &ChatRequest) -> Result<Value> {
        match parse_json_reply(&self.chat(request)?) {
            Ok(v) => Ok(v),
            Err(GatewayError::MalformedReply(first)) => {
                self.reprompts.fetch_add(1, Ordering::SeqCst);
                log::warn!("malformed reply, re-prompting once: {first}");
                let retry = ChatRequest {
                    system_prompt: format!("{}{REPROMPT_SUFFIX}", request.system_prompt),
                    ..request.clone()
                };
                parse_json_reply(&self.chat(&retry)?)
            }
            Err(e) => Err(e),
        }
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let ns = self.backend.namespace();
        let key = |t: &str| json!({"op": "embed", "namespace": ns, "model": self.config.embedding_model, "text": t});
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing: Vec<String> = Vec::new();
        let mut queued = std::collections::HashSet::new();
        for (i, t) in texts.iter().enumerate() {
            let hit = match &self.cache {
                Some(c) => c.get(&key(t))?.and_then(|v| serde_json::from_value::<Vec<f64>>(v).ok()),
                None => None,
            };
            match hit {
                Some(v) => {
                    self.cache_hits.fetch_add(1, Ordering::SeqCst);
                    out[i] = Some(v);
                }
                None => {
                    if queued.insert(t.as_str()) {
                        missing.push(t.clone());
                    }
                }
            }
        }
        let batches: Vec<&[String]> = missing.chunks(self.config.embed_batch).collect();
        let results = self.fan_out(&batches, |batch| self.call_backend(|b| b.embed(batch)));
        let mut fresh = std::collections::HashMap::new();
        for (batch, result) in batches.iter().zip(results) {
            let vectors = result?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::MalformedReply(format!(
                    "{} embeddings for {} texts",
                    vectors.len(),
                    batch.len()
                )));
            }
            for (t, v) in batch.iter().zip(vectors) {
                let v = normalize(v)?;
                if let Some(c) = &self.cache {
                    c.put(&key(t), &json!(v))?;
                }
                fresh.insert(t.clone(), v);
            }
        }
        let vectors: Vec<Vec<f64>> = out
            .into_iter()
            .zip(texts)
            .map(|(v, t)| v.unwrap_or_else(|| fresh[t].clone()))
            .collect();
        for v in &vectors {
            self.check_dimension(v.len())?;
        }
        Ok(vectors
            .into_iter()
            .zip(texts)
            .map(|(values, t)| EmbeddingVector {
                values,
                source_text: t.clone(),
            })
            .collect())
    }

    fn check_dimension(&self, d: usize) -> Result<()> {
        match self.dimension.compare_exchange(0, d, Ordering::SeqCst, Ordering::SeqCst) {
            Ok(_) => Ok(()),
            Err(expected) if expected == d => Ok(()),
            Err(expected) => Err(GatewayError::DimensionMismatch { expected, got: d }),
        }
    }

    pub fn sentiment_score(&self, text: &str) -> Result<SentimentScore> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty text".into()));
        }
        let key = json!({
            "op": "sentiment",
            "namespace": self.backend.namespace(),
            "model": self.config.sentiment_model,
            "text": text,
        });
        let v: f64 = self.cached(&key, || {
            let v = self.call_backend(|b| b.sentiment(text))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(GatewayError::MalformedReply(format!("sentiment {v} outside [0, 1]")));
            }
            Ok(v)
        })?;
        Ok(SentimentScore(v))
    }

    /// Runs `f` over `items` on up to `max_in_flight` threads; results keep
    /// input order.
    pub fn fan_out<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        let workers = self.config.max_in_flight.min(items.len());
        if workers <= 1 {
            return items.iter().map(f).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(&items[i]);
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot filled"))
            .collect()
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(GatewayError::MalformedReply("zero or non-finite embedding".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Extracts the first JSON object from a completion, tolerating code fences
/// and surrounding prose.
pub fn parse_json_reply(completion: &str) -> Result<Value> {
    for (i, _) in completion.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&completion[i..]).into_iter::<Value>();
        if let Some(Ok(v @ Value::Object(_))) = stream.next() {
            return Ok(v);
        }
    }
    let preview: String = completion.chars().take(80).collect();
    Err(GatewayError::MalformedReply(format!("no JSON object in {preview:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn req(payload: &str) -> ChatRequest {
        ChatRequest {
            system_prompt: "sys".into(),
            user_payload: payload.into(),
            temperature: 0.0,
            max_tokens: 50,
            response_format: ResponseFormat::JsonObject,
        }
    }

    #[test]
    fn parse_reply_variants() {
        assert_eq!(parse_json_reply("```json {\"a\":1} ```").unwrap(), json!({"a": 1}));
        assert_eq!(parse_json_reply("{\"verdict\":\"Y\"}").unwrap(), json!({"verdict": "Y"}));
        assert_eq!(
            parse_json_reply("Sure! {broken {\"x\": [1, {\"y\": 2}]} trailing").unwrap(),
            json!({"x": [1, {"y": 2}]})
        );
        assert!(matches!(
            parse_json_reply("sorry, I cannot"),
            Err(GatewayError::MalformedReply(_))
        ));
    }

    #[test]
    fn request_validation() {
        assert!(req("").validate().is_err());
        let mut r = req("x");
        r.temperature = -1.0;
        assert!(r.validate().is_err());
        r.temperature = 0.3;
        r.max_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn cache_replays_without_backend_call() {
        let dir = tempfile::tempdir().unwrap();
        let config = GatewayConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..GatewayConfig::default()
        };
        let g = Gateway::from_config(config.clone()).unwrap();
        let r = req(r#"{"prediction":"positive","key_features":["user need: Sleep","item feature: Bed"]}"#);
        let cold = g.chat(&r).unwrap();
        let warm = g.chat(&r).unwrap();
        assert_eq!(cold, warm);
        assert_eq!(g.stats().backend_calls, 1);
        assert_eq!(g.stats().cache_hits, 1);

        let g2 = Gateway::from_config(config).unwrap();
        assert_eq!(g2.chat(&r).unwrap(), cold);
        assert_eq!(g2.stats().backend_calls, 0);

        // Temperature is part of the key.
        let mut hot = r.clone();
        hot.temperature = 0.7;
        g2.chat(&hot).unwrap();
        assert_eq!(g2.stats().backend_calls, 1);
    }

    #[test]
    fn embeddings_normalized_and_deduplicated() {
        let g = Gateway::mock(3);
        let texts: Vec<String> = ["clean room", "friendly staff", "clean room"].map(String::from).into();
        let v = g.embed(&texts).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0].values, v[2].values);
        for e in &v {
            let n: f64 = e.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(v[1].source_text, "friendly staff");
        assert!(g.embed(&[]).is_err());
    }

    #[test]
    fn sentiment_bounds_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let g = Gateway::from_config(GatewayConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..GatewayConfig::default()
        })
        .unwrap();
        let bad = g.sentiment_score("terrible awful").unwrap();
        assert!(bad.value() < 0.5);
        assert_eq!(g.sentiment_score("terrible awful").unwrap(), bad);
        assert_eq!(g.stats().backend_calls, 1);
        assert!(g.sentiment_score("  ").is_err());
    }

    #[test]
    fn max_in_flight_is_a_hard_bound() {
        let mock = Arc::new(MockBackend::new(0, 0.0).with_delay(Duration::from_millis(2)));
        struct Shared(Arc<MockBackend>);
        impl Backend for Shared {
            fn namespace(&self) -> String {
                self.0.namespace()
            }
            fn chat(&self, r: &ChatRequest) -> Result<String> {
                self.0.chat(r)
            }
            fn embed(&self, t: &[String]) -> Result<Vec<Vec<f64>>> {
                self.0.embed(t)
            }
            fn sentiment(&self, t: &str) -> Result<f64> {
                self.0.sentiment(t)
            }
        }
        let config = GatewayConfig {
            max_in_flight: 8,
            embed_batch: 1,
            ..GatewayConfig::default()
        };
        let g = Gateway::new(config, Box::new(Shared(mock.clone()))).unwrap();
        let texts: Vec<String> = (0..1000).map(|i| format!("phrase number {i}")).collect();
        g.embed(&texts).unwrap();
        assert!(mock.peak_in_flight() <= 8, "peak {}", mock.peak_in_flight());
        assert!(mock.peak_in_flight() > 1);
        // Callers outside the gateway's own fan-out are bounded too.
        let g = Arc::new(g);
        std::thread::scope(|s| {
            for t in 0..32 {
                let g = g.clone();
                s.spawn(move || g.sentiment_score(&format!("good {t}")).unwrap());
            }
        });
        assert!(mock.peak_in_flight() <= 8);
    }

    #[test]
    fn reprompt_once_then_error() {
        let g = Gateway::from_config(GatewayConfig {
            mock_fault_rate: 1.0,
            ..GatewayConfig::default()
        })
        .unwrap();
        let err = g.chat_json(&req(r#"{"explanation":"x","sentiment":"positive"}"#)).unwrap_err();
        assert!(matches!(err, GatewayError::MalformedReply(_)));
        assert_eq!(g.stats().reprompts, 1);
        assert_eq!(g.stats().backend_calls, 2);
    }

    #[test]
    fn fan_out_preserves_order() {
        let g = Gateway::mock(0);
        let items: Vec<usize> = (0..100).collect();
        assert_eq!(g.fan_out(&items, |i| i * 2), items.iter().map(|i| i * 2).collect::<Vec<_>>());
    }
}
