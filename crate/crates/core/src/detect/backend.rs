use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

use super::prompt::estimate_tokens;
use super::{Backoff, LlmConfig};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("prompt of ~{tokens} tokens exceeds the {window}-token context window")]
    ContextOverflow { tokens: u64, window: u64 },
    #[error("backend rejected the credentials: {0}")]
    Auth(String),
    #[error("backend rejected the request: {0}")]
    Rejected(String),
}

/// Outcome of a single request, before retry handling.
#[derive(Debug, Clone)]
pub enum AttemptError {
    /// Worth retrying: connection failures, 429, 5xx.
    Transient(String),
    Fatal(BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// One chat-completion request with a single user message.
pub trait ChatBackend: Send + Sync {
    fn attempt(&self, prompt: &str, cfg: &LlmConfig) -> Result<Completion, AttemptError>;
}

fn backoff_delay(backoff: &Backoff, attempt: u32) -> Duration {
    match *backoff {
        Backoff::Fixed(d) => d,
        Backoff::Exponential { base, max } => base.saturating_mul(1u32 << attempt.min(16)).min(max),
    }
}

/// Sends `prompt`, retrying transient failures per `cfg.retry`. Prompts
/// larger than the configured context window fail without a request.
pub fn complete(backend: &dyn ChatBackend, prompt: &str, cfg: &LlmConfig) -> Result<Completion, BackendError> {
    let tokens = estimate_tokens(prompt);
    if let Some(window) = cfg.context_window {
        if tokens > window {
            return Err(BackendError::ContextOverflow { tokens, window });
        }
    }
    let attempts = cfg.retry.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            thread::sleep(backoff_delay(&cfg.retry.backoff, attempt - 1));
        }
        match backend.attempt(prompt, cfg) {
            Ok(c) => return Ok(c),
            Err(AttemptError::Fatal(e)) => return Err(e),
            Err(AttemptError::Transient(msg)) => {
                warn!(attempt = attempt + 1, error = %msg, "chat request failed");
                last = msg;
            }
        }
    }
    Err(BackendError::BackendUnavailable { attempts, last })
}

/// Client for OpenAI-compatible `/chat/completions` servers, remote or local.
pub struct OpenAiCompatible {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl OpenAiCompatible {
    pub fn new(api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Rejected(format!("cannot build HTTP client: {e}")))?;
        Ok(OpenAiCompatible { client, api_key })
    }

    fn url(endpoint: &str) -> String {
        let base = endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

fn is_context_error(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length") || lower.contains("context length") || lower.contains("maximum context")
}

impl ChatBackend for OpenAiCompatible {
    fn attempt(&self, prompt: &str, cfg: &LlmConfig) -> Result<Completion, AttemptError> {
        let body = json!({
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        });
        let mut request = self.client.post(Self::url(&cfg.endpoint)).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| AttemptError::Transient(e.to_string()))?;
        debug!(%status, bytes = text.len(), "chat response");
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(AttemptError::Fatal(BackendError::Auth(format!("HTTP {status}"))));
        }
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(AttemptError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            if is_context_error(&text) {
                let window = cfg.context_window.unwrap_or_default();
                return Err(AttemptError::Fatal(BackendError::ContextOverflow {
                    tokens: estimate_tokens(prompt),
                    window,
                }));
            }
            return Err(AttemptError::Fatal(BackendError::Rejected(format!("HTTP {status}: {text}"))));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(BackendError::Rejected(format!("invalid JSON response: {e}"))))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                AttemptError::Fatal(BackendError::Rejected("response has no choices[0].message.content".into()))
            })?
            .to_string();
        let usage = |key: &str| value.get("usage").and_then(|u| u.get(key)).and_then(Value::as_u64);
        Ok(Completion {
            input_tokens: usage("prompt_tokens").unwrap_or_else(|| estimate_tokens(prompt)),
            output_tokens: usage("completion_tokens").unwrap_or_else(|| estimate_tokens(&content)),
            text: content,
        })
    }
}
