//! OpenAI-compatible HTTP clients (chat completions, embeddings and
//! completions with log-probabilities).

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::client::{ChatClient, ClientError, Embedder, LogprobClient, RateLimiter, TokenLogprobs};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "REVBROWSE_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
    pub requests_per_second: f64,
}

impl HttpSettings {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpSettings {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            requests_per_second: 0.0,
        }
    }
}

struct Transport {
    settings: HttpSettings,
    agent: ureq::Agent,
    limiter: RateLimiter,
}

impl Transport {
    fn new(settings: HttpSettings) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = RateLimiter::new(settings.requests_per_second, 4);
        Transport {
            settings,
            agent,
            limiter,
        }
    }

    /// POST `body` to `path`, retrying transport failures, 429 and 5xx with
    /// exponential backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        let url = format!("{}/{}", self.settings.base_url, path.trim_start_matches('/'));
        let attempts = self.settings.max_attempts.max(1);
        let mut backoff = self.settings.initial_backoff;
        let mut last_backoff_ms = 0;
        let mut last_error = String::new();

        for attempt in 1..=attempts {
            self.limiter.acquire();
            let mut req = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(key) = &self.settings.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        return resp
                            .body_mut()
                            .read_json::<Value>()
                            .map_err(|e| ClientError::Decode(e.to_string()));
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if status != 429 && status < 500 {
                        return Err(ClientError::Status { status, body: text });
                    }
                    last_error = format!("status {status}: {text}");
                }
                Err(e) => last_error = e.to_string(),
            }
            if attempt < attempts {
                log::warn!("request to {url} failed (attempt {attempt}): {last_error}");
                std::thread::sleep(backoff);
                last_backoff_ms = backoff.as_millis() as u64;
                backoff *= 2;
            }
        }
        Err(ClientError::Transport {
            message: last_error,
            attempts,
            last_backoff_ms,
        })
    }
}

pub struct HttpChatClient {
    transport: Transport,
    model: String,
}

impl HttpChatClient {
    pub fn new(settings: HttpSettings, model: impl Into<String>) -> Self {
        HttpChatClient {
            transport: Transport::new(settings),
            model: model.into(),
        }
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatClient for HttpChatClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        let value = self.transport.post("chat/completions", &self.request_body(prompt))?;
        let resp: ChatResponse =
            serde_json::from_value(value).map_err(|e| ClientError::Decode(e.to_string()))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientError::Decode("response has no message content".into()))
    }
}

pub struct HttpEmbedder {
    transport: Transport,
    model: String,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(settings: HttpSettings, model: impl Into<String>, dim: usize) -> Self {
        HttpEmbedder {
            transport: Transport::new(settings),
            model: model.into(),
            dim,
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

/// Reorder embedding items by their `index` field and check shapes.
fn collect_embeddings(
    resp: EmbeddingResponse,
    expected: usize,
    dim: usize,
) -> Result<Vec<Vec<f32>>, ClientError> {
    if resp.data.len() != expected {
        return Err(ClientError::Decode(format!(
            "expected {expected} embeddings, got {}",
            resp.data.len()
        )));
    }
    let mut slots: Vec<Option<Vec<f32>>> = vec![None; expected];
    for (pos, item) in resp.data.into_iter().enumerate() {
        let idx = item.index.unwrap_or(pos);
        if idx >= expected || slots[idx].is_some() {
            return Err(ClientError::Decode(format!("bad embedding index {idx}")));
        }
        if item.embedding.len() != dim {
            return Err(ClientError::Decode(format!(
                "embedding dimension {} does not match configured {dim}",
                item.embedding.len()
            )));
        }
        slots[idx] = Some(item.embedding);
    }
    Ok(slots.into_iter().map(Option::unwrap).collect())
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "model": self.model, "input": texts });
        let value = self.transport.post("embeddings", &body)?;
        let resp: EmbeddingResponse =
            serde_json::from_value(value).map_err(|e| ClientError::Decode(e.to_string()))?;
        collect_embeddings(resp, texts.len(), self.dim)
    }
}

/// Completions endpoint client requesting first-token log-probabilities.
pub struct HttpLogprobClient {
    transport: Transport,
    model: String,
    top_logprobs: u32,
}

impl HttpLogprobClient {
    pub fn new(settings: HttpSettings, model: impl Into<String>) -> Self {
        HttpLogprobClient {
            transport: Transport::new(settings),
            model: model.into(),
            top_logprobs: 26,
        }
    }

    pub fn request_body(&self, prompt: &str, with_logprobs: bool) -> Value {
        let mut body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0,
        });
        if with_logprobs {
            body["logprobs"] = json!(self.top_logprobs);
        }
        body
    }
}

/// Extract `choices[0].logprobs.top_logprobs[0]` from a completions response.
pub fn parse_completion_logprobs(value: &Value) -> Result<TokenLogprobs, ClientError> {
    let first = value
        .pointer("/choices/0/logprobs/top_logprobs/0")
        .and_then(Value::as_object)
        .ok_or(ClientError::Unsupported("first-token log-probabilities"))?;
    first
        .iter()
        .map(|(tok, lp)| {
            lp.as_f64()
                .map(|lp| (tok.clone(), lp))
                .ok_or_else(|| ClientError::Decode(format!("non-numeric logprob for {tok:?}")))
        })
        .collect()
}

impl LogprobClient for HttpLogprobClient {
    fn first_token_logprobs(&self, prompt: &str) -> Result<TokenLogprobs, ClientError> {
        let value = self.transport.post("completions", &self.request_body(prompt, true))?;
        parse_completion_logprobs(&value)
    }

    fn generate(&self, prompt: &str) -> Result<String, ClientError> {
        let value = self.transport.post("completions", &self.request_body(prompt, false))?;
        value
            .pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Decode("completion has no text".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_shape() {
        let c = HttpChatClient::new(HttpSettings::new("http://localhost:1/v1/"), "m");
        let body = c.request_body("hi");
        assert_eq!(body["model"], "m");
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hi");
    }

    #[test]
    fn completions_body_requests_26_logprobs() {
        let c = HttpLogprobClient::new(HttpSettings::new("http://x"), "m");
        assert_eq!(c.request_body("p", true)["logprobs"], 26);
        assert!(c.request_body("p", false).get("logprobs").is_none());
    }

    #[test]
    fn embeddings_reordered_by_index() {
        let resp: EmbeddingResponse = serde_json::from_value(json!({
            "data": [
                {"index": 1, "embedding": [0.0, 1.0]},
                {"index": 0, "embedding": [1.0, 0.0]}
            ]
        }))
        .unwrap();
        let out = collect_embeddings(resp, 2, 2).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn embedding_dimension_mismatch() {
        let resp: EmbeddingResponse =
            serde_json::from_value(json!({"data": [{"embedding": [1.0]}]})).unwrap();
        assert!(matches!(collect_embeddings(resp, 1, 2), Err(ClientError::Decode(_))));
    }

    #[test]
    fn logprob_parsing() {
        let v = json!({"choices": [{"text": "A", "logprobs": {"top_logprobs": [{"A": -0.1, " B": -2.3}]}}]});
        let lp = parse_completion_logprobs(&v).unwrap();
        assert_eq!(lp["A"], -0.1);
        assert_eq!(lp[" B"], -2.3);

        let v = json!({"choices": [{"text": "A"}]});
        assert!(matches!(
            parse_completion_logprobs(&v),
            Err(ClientError::Unsupported(_))
        ));
    }

    #[test]
    fn unreachable_server_reports_attempts() {
        let mut s = HttpSettings::new("http://127.0.0.1:9");
        s.max_attempts = 2;
        s.initial_backoff = Duration::from_millis(1);
        s.timeout = Duration::from_secs(2);
        let c = HttpChatClient::new(s, "m");
        match c.complete("hi") {
            Err(ClientError::Transport { attempts, last_backoff_ms, .. }) => {
                assert_eq!(attempts, 2);
                assert_eq!(last_backoff_ms, 1);
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
