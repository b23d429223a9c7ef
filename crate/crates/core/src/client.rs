//! Language-model client abstractions.
//!
//! Extraction talks to a [`ChatClient`], the retriever to an [`Embedder`] and
//! the verbalizer to a [`LogprobClient`]. Each has an HTTP implementation in
//! [`crate::http`] and a deterministic offline implementation.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure after {attempts} attempt(s), last backoff {last_backoff_ms} ms: {message}")]
    Transport {
        message: String,
        attempts: u32,
        last_backoff_ms: u64,
    },
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode response: {0}")]
    Decode(String),
    #[error("client does not support {0}")]
    Unsupported(&'static str),
    #[error("{0}")]
    Other(String),
}

pub trait ChatClient: Send + Sync {
    fn model_id(&self) -> &str;

    /// Single-turn completion of `prompt` at temperature 0.
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError>;
}

/// Log-probabilities of candidate first tokens, keyed by token text.
pub type TokenLogprobs = BTreeMap<String, f64>;

pub trait LogprobClient: Send + Sync {
    /// Top log-probabilities of the first generated token.
    fn first_token_logprobs(&self, prompt: &str) -> Result<TokenLogprobs, ClientError>;

    /// Plain generation, used when log-probabilities are unavailable.
    fn generate(&self, prompt: &str) -> Result<String, ClientError> {
        let _ = prompt;
        Err(ClientError::Unsupported("text generation"))
    }
}

/// Token bucket shared by all threads issuing requests through one client.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_second: f64, burst: u32) -> Self {
        let capacity = burst.max(1) as f64;
        RateLimiter {
            capacity,
            per_second,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Block until one token is available. A non-positive rate disables limiting.
    pub fn acquire(&self) {
        if self.per_second <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut guard = self.state.lock().unwrap();
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.per_second)
                    .min(self.capacity);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                (1.0 - *tokens) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}
