//! LLM backend access: prompt rendering, candidate sampling, yes/no scoring.
//!
//! Everything downstream talks to a [`Gateway`], which owns one backend
//! (mock or HTTP), an optional content-addressed response cache, and a
//! max-in-flight limiter. Requests are fully described by value, so a cached
//! run and a live run are interchangeable: identical requests yield identical
//! responses with at most one backend call.

mod cache;
mod mock;
mod prompt;

#[cfg(feature = "http-backend")]
mod http;

pub use cache::{cache_key, CachedResponse, DiskCache};
#[cfg(feature = "http-backend")]
pub use http::HttpLlm;
pub use mock::MockLlm;
pub use prompt::{render_prompt, PromptContext, PromptLimits};

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt for {kind:?} is missing {what}")]
    MissingContext { kind: PromptKind, what: &'static str },
    #[error("rendered prompt is {len} chars, over the {max}-char budget")]
    OverBudget { len: usize, max: usize },
    #[error("generation request must ask for at least one candidate")]
    ZeroCandidates,
    #[error("mock could not parse prompt: {0}")]
    MockParse(String),
    #[error("backend transport: {0}")]
    Transport(String),
    #[error("backend contract violation: {0}")]
    Contract(String),
    #[error("cache io at {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The five prompt families the pipeline renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Extract an interest summary from one behavior chunk (optionally
    /// conditioned on the previous summary).
    Interest,
    /// Ask for world knowledge about one item.
    Item,
    /// Will-the-user-like-it, referencing the previous K interest summaries.
    Seq,
    /// Will-the-user-like-it, referencing the current interest summary.
    Point,
    /// Will-the-user-like-it, referencing the raw behaviors of the chunk.
    Hist,
}

impl PromptKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::Interest => "interest",
            PromptKind::Item => "item",
            PromptKind::Seq => "seq",
            PromptKind::Point => "point",
            PromptKind::Hist => "hist",
        }
    }
}

/// A fully rendered generation request. Candidate `k` of a response is a pure
/// function of (rendered, seed, k) for the mock backend, which is what makes
/// whole-pipeline runs reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenRequest {
    pub kind: PromptKind,
    pub rendered: String,
    pub n: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

/// Declarative backend selection, serializable as part of the pipeline config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Base URL for `kind = http`; the client POSTs to `{endpoint}/generate`
    /// and `{endpoint}/yes_prob`.
    pub endpoint: Option<String>,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Mock-only: category vocabulary size the corruptor may draw from.
    pub mock_vocab: usize,
    /// Mock-only: per-occurrence probability of corrupting a category token.
    pub mock_p_corrupt: f64,
    /// Mock-only: stream seed folded into every candidate.
    pub mock_seed: u64,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        BackendDescriptor {
            kind: BackendKind::Mock,
            endpoint: None,
            max_in_flight: 1,
            cache_dir: None,
            timeout_ms: 10_000,
            retries: 2,
            mock_vocab: 8,
            mock_p_corrupt: 0.8,
            mock_seed: 0,
        }
    }
}

/// One text-generation backend. Implementations must be pure functions of the
/// request (given their own fixed identity) or point at services that are.
pub trait LlmBackend: Send + Sync {
    /// Stable identity folded into cache keys.
    fn id(&self) -> String;
    fn generate(&self, req: &GenRequest) -> Result<Vec<String>, GatewayError>;
    fn yes_probability(&self, rendered: &str) -> Result<f64, GatewayError>;
}

// Counting semaphore; std has no async here to lean on and the dependency
// would be heavier than these 20 lines.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter { max: max.max(1), in_flight: Mutex::new(0), cv: Condvar::new() }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        drop(n);
        let out = f();
        *self.in_flight.lock().unwrap() -= 1;
        self.cv.notify_one();
        out
    }
}

pub struct Gateway {
    backend: Box<dyn LlmBackend>,
    cache: Option<DiskCache>,
    limiter: Limiter,
}

impl Gateway {
    /// Builds the backend named by the descriptor. `cache_override` (from the
    /// HITLBM_CACHE_DIR environment variable at the CLI layer) wins over the
    /// descriptor's cache_dir.
    pub fn from_descriptor(
        desc: &BackendDescriptor,
        cache_override: Option<PathBuf>,
    ) -> Result<Self, GatewayError> {
        let backend: Box<dyn LlmBackend> = match desc.kind {
            BackendKind::Mock => {
                Box::new(MockLlm::new(desc.mock_seed, desc.mock_p_corrupt, desc.mock_vocab))
            }
            BackendKind::Http => {
                #[cfg(feature = "http-backend")]
                {
                    let endpoint = desc.endpoint.clone().ok_or_else(|| {
                        GatewayError::Contract("http backend requires an endpoint".into())
                    })?;
                    Box::new(HttpLlm::new(endpoint, desc.timeout_ms, desc.retries))
                }
                #[cfg(not(feature = "http-backend"))]
                {
                    return Err(GatewayError::Contract(
                        "built without the http-backend feature".into(),
                    ));
                }
            }
        };
        let cache_dir = cache_override.or_else(|| desc.cache_dir.clone());
        let cache = cache_dir.map(DiskCache::new).transpose()?;
        Ok(Gateway { backend, cache, limiter: Limiter::new(desc.max_in_flight) })
    }

    /// Wraps an arbitrary backend; used by tests and the HTTP loopback suite.
    pub fn from_backend(backend: Box<dyn LlmBackend>, cache: Option<DiskCache>) -> Self {
        Gateway { backend, cache, limiter: Limiter::new(1) }
    }

    /// Returns exactly `req.n` candidate texts.
    pub fn sample_candidates(&self, req: &GenRequest) -> Result<Vec<String>, GatewayError> {
        if req.n == 0 {
            return Err(GatewayError::ZeroCandidates);
        }
        let key = cache_key(&serde_json::json!({
            "op": "generate",
            "backend": self.backend.id(),
            "kind": req.kind.as_str(),
            "rendered": req.rendered,
            "n": req.n,
            "temperature": req.temperature,
            "seed": req.seed,
            "max_tokens": req.max_tokens,
        }));
        if let Some(cache) = &self.cache {
            if let Some(CachedResponse::Texts { texts }) = cache.get(&key)? {
                return Ok(texts);
            }
        }
        let texts = self.limiter.run(|| self.backend.generate(req))?;
        if texts.len() != req.n {
            return Err(GatewayError::Contract(format!(
                "asked for {} candidates, backend returned {}",
                req.n,
                texts.len()
            )));
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, &CachedResponse::Texts { texts: texts.clone() })?;
        }
        Ok(texts)
    }

    /// Probability that the backend answers "yes" to a rendered seq/point/hist
    /// prompt. Always within [0, 1].
    pub fn yes_probability(&self, rendered: &str) -> Result<f64, GatewayError> {
        let key = cache_key(&serde_json::json!({
            "op": "yes_prob",
            "backend": self.backend.id(),
            "rendered": rendered,
        }));
        if let Some(cache) = &self.cache {
            if let Some(CachedResponse::PYes { p_yes }) = cache.get(&key)? {
                return Ok(p_yes);
            }
        }
        let p = self.limiter.run(|| self.backend.yes_probability(rendered))?;
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(GatewayError::Contract(format!("p_yes {p} is outside [0, 1]")));
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, &CachedResponse::PYes { p_yes: p })?;
        }
        Ok(p)
    }
}
