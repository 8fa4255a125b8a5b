//! Inference gateway: chat completions and continuation log-likelihoods,
//! fronted by a deterministic replay cache.
//!
//! In live mode a cache hit is served without touching the endpoint and a
//! miss issues exactly one request (with retries) whose result is appended
//! to the cache. Replay mode never talks to the network.

mod cache;
mod http;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use cache::{request_key, sha256_hex, CacheEntry, EntryKind, ReplayCache};
pub use http::{HttpBackend, HttpConfig};

use crate::error::{Error, Result};
use crate::prompt::{Tokenizer, WhitespaceTokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: u32,
    /// 0 means greedy decoding.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_new_tokens: 256,
            temperature: 0.0,
            stop_sequences: vec!["\n\n".into()],
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub token_count_prompt: u64,
    pub token_count_output: u64,
    pub source: Source,
}

/// Raw completion as returned by an endpoint. Token counts are `None`
/// when the endpoint does not report usage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

/// Something that can answer completion and scoring requests.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &str, cfg: &DecodeConfig) -> Result<Completion>;

    /// Log-probabilities of each token of `continuation` given `prompt`.
    fn continuation_logprobs(&self, prompt: &str, continuation: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Replay,
}

/// How per-token log-probabilities are reduced to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoglikReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LoglikValue {
    sum: f64,
    n_tokens: u64,
}

pub struct Gateway {
    mode: GatewayMode,
    model: String,
    backend: Option<Arc<dyn Backend>>,
    cache: ReplayCache,
    reduction: LoglikReduction,
    max_in_flight: usize,
    tokenizer: Box<dyn Tokenizer>,
    live_calls: AtomicU64,
}

impl Gateway {
    pub fn replay(model: impl Into<String>, cache: ReplayCache) -> Self {
        Gateway {
            mode: GatewayMode::Replay,
            model: model.into(),
            backend: None,
            cache,
            reduction: LoglikReduction::Sum,
            max_in_flight: 1,
            tokenizer: Box::new(WhitespaceTokenizer),
            live_calls: AtomicU64::new(0),
        }
    }

    pub fn live(model: impl Into<String>, cache: ReplayCache, backend: Arc<dyn Backend>) -> Self {
        Gateway {
            mode: GatewayMode::Live,
            backend: Some(backend),
            ..Self::replay(model, cache)
        }
    }

    pub fn with_reduction(mut self, reduction: LoglikReduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Box<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Number of requests that reached the backend.
    pub fn live_calls(&self) -> u64 {
        self.live_calls.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &ReplayCache {
        &self.cache
    }

    pub fn count_tokens(&self, text: &str) -> u64 {
        self.tokenizer.count(text)
    }

    fn backend(&self) -> Result<&dyn Backend> {
        self.backend.as_deref().ok_or(Error::NoBackend)
    }

    pub fn completion_key(&self, prompt: &str, cfg: &DecodeConfig) -> String {
        request_key(&json!({
            "kind": EntryKind::Complete.as_str(),
            "model": self.model,
            "prompt": prompt,
            "cfg": cfg,
        }))
    }

    pub fn loglik_key(&self, prompt: &str, continuation: &str) -> String {
        request_key(&json!({
            "kind": EntryKind::Loglik.as_str(),
            "model": self.model,
            "prompt": prompt,
            "continuation": continuation,
        }))
    }

    pub fn complete(&self, prompt: &str, cfg: &DecodeConfig) -> Result<CompletionResult> {
        cfg.validate()?;
        let key = self.completion_key(prompt, cfg);
        if let Some(entry) = self.cache.get(&key) {
            let c: Completion = serde_json::from_value(entry.value)?;
            return Ok(self.finish(prompt, c, Source::Replay));
        }
        if self.mode == GatewayMode::Replay {
            return Err(Error::CacheMiss { kind: "complete", key });
        }
        let c = self.backend()?.complete(prompt, cfg)?;
        self.live_calls.fetch_add(1, Ordering::Relaxed);
        self.cache.insert(CacheEntry {
            key,
            prompt_hash: sha256_hex(prompt.as_bytes()),
            kind: EntryKind::Complete,
            value: serde_json::to_value(&c)?,
        })?;
        Ok(self.finish(prompt, c, Source::Live))
    }

    fn finish(&self, prompt: &str, c: Completion, source: Source) -> CompletionResult {
        CompletionResult {
            token_count_prompt: c.prompt_tokens.unwrap_or_else(|| self.tokenizer.count(prompt)),
            token_count_output: c.output_tokens.unwrap_or_else(|| self.tokenizer.count(&c.text)),
            text: c.text,
            source,
        }
    }

    /// Log-likelihood of `continuation` given `prompt` (sum of token
    /// log-probabilities by default). An empty continuation scores 0.
    pub fn loglikelihood(&self, prompt: &str, continuation: &str) -> Result<f64> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let key = self.loglik_key(prompt, continuation);
        let value = if let Some(entry) = self.cache.get(&key) {
            serde_json::from_value::<LoglikValue>(entry.value)?
        } else if self.mode == GatewayMode::Replay {
            return Err(Error::CacheMiss { kind: "loglik", key });
        } else {
            let lps = self.backend()?.continuation_logprobs(prompt, continuation)?;
            self.live_calls.fetch_add(1, Ordering::Relaxed);
            let value = LoglikValue {
                sum: lps.iter().sum(),
                n_tokens: lps.len() as u64,
            };
            self.cache.insert(CacheEntry {
                key,
                prompt_hash: sha256_hex(prompt.as_bytes()),
                kind: EntryKind::Loglik,
                value: serde_json::to_value(value)?,
            })?;
            value
        };
        Ok(match self.reduction {
            LoglikReduction::Sum => value.sum,
            LoglikReduction::Mean if value.n_tokens == 0 => 0.0,
            LoglikReduction::Mean => value.sum / value.n_tokens as f64,
        })
    }

    /// Primes the cache with a known log-likelihood (fixtures, imports).
    pub fn store_loglik(&self, prompt: &str, continuation: &str, sum: f64, n_tokens: u64) -> Result<()> {
        self.cache.insert(CacheEntry {
            key: self.loglik_key(prompt, continuation),
            prompt_hash: sha256_hex(prompt.as_bytes()),
            kind: EntryKind::Loglik,
            value: serde_json::to_value(LoglikValue { sum, n_tokens })?,
        })
    }

    /// Primes the cache with a known completion.
    pub fn store_completion(&self, prompt: &str, cfg: &DecodeConfig, completion: &Completion) -> Result<()> {
        self.cache.insert(CacheEntry {
            key: self.completion_key(prompt, cfg),
            prompt_hash: sha256_hex(prompt.as_bytes()),
            kind: EntryKind::Complete,
            value: serde_json::to_value(completion)?,
        })
    }
}
