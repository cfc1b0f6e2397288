use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;

use super::{IngestError, SourceUnit};

pub const ETHERSCAN_KEY_ENV: &str = "PONZILENS_ETHERSCAN_KEY";

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub api_base_url: String,
    pub api_key: String,
    /// Requests per second.
    pub rate_limit: f64,
    pub timeout: Duration,
    /// Attempts made when the explorer answers with a rate-limit response.
    pub max_attempts: u32,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig {
            api_base_url: "https://api.etherscan.io/api".into(),
            api_key: String::new(),
            rate_limit: 5.0,
            timeout: Duration::from_secs(30),
            max_attempts: 3,
        }
    }
}

impl FetchConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.rate_limit.is_nan() || self.rate_limit <= 0.0 {
            return Err(IngestError::InvalidConfig("rate_limit must be > 0".into()));
        }
        if self.timeout.is_zero() {
            return Err(IngestError::InvalidConfig("timeout must be > 0".into()));
        }
        if self.api_key.trim().is_empty() {
            return Err(IngestError::Auth(format!("no API key configured (set {ETHERSCAN_KEY_ENV})")));
        }
        Ok(())
    }

    /// Applies `PONZILENS_ETHERSCAN_KEY` over the configured key.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(key) = std::env::var(ETHERSCAN_KEY_ENV) {
            if !key.trim().is_empty() {
                self.api_key = key;
            }
        }
        self
    }
}

/// Sliding-window limiter: at most `floor(rate)` acquisitions in any window of
/// one second (for rates below one, one acquisition per `1/rate` seconds).
#[derive(Debug)]
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    recent: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        assert!(per_second > 0.0, "rate limit must be positive");
        let (capacity, window) = if per_second >= 1.0 {
            (per_second.floor() as usize, Duration::from_secs(1))
        } else {
            (1, Duration::from_secs_f64(1.0 / per_second))
        };
        RateLimiter { capacity, window, recent: Mutex::new(VecDeque::with_capacity(capacity)) }
    }

    /// Blocks until a request may be sent.
    pub fn acquire(&self) {
        // Small margin so that server-side timestamps taken a little later
        // still see a full window between request i and i + capacity.
        let margin = Duration::from_millis(5);
        loop {
            let wait = {
                let mut recent = self.recent.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                while recent.front().is_some_and(|t| now.duration_since(*t) >= self.window + margin) {
                    recent.pop_front();
                }
                if recent.len() < self.capacity {
                    recent.push_back(now);
                    return;
                }
                (*recent.front().expect("non-empty window") + self.window + margin).saturating_duration_since(now)
            };
            std::thread::sleep(wait.max(Duration::from_millis(1)));
        }
    }
}

/// Accepts `0x`-prefixed or bare 40-hex-digit addresses; returns the
/// `0x`-prefixed form.
pub fn validate_address(address: &str) -> Result<String, IngestError> {
    let hex = address.strip_prefix("0x").or_else(|| address.strip_prefix("0X")).unwrap_or(address);
    if hex.len() == 40 && hex.chars().all(|c| c.is_ascii_hexdigit()) {
        Ok(format!("0x{hex}"))
    } else {
        Err(IngestError::InvalidAddress(address.to_string()))
    }
}

/// Verified-source client sharing one rate limiter across threads.
#[derive(Debug, Clone)]
pub struct ExplorerClient {
    cfg: FetchConfig,
    http: reqwest::blocking::Client,
    limiter: Arc<RateLimiter>,
}

impl ExplorerClient {
    pub fn new(cfg: FetchConfig) -> Result<Self, IngestError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| IngestError::Network(e.to_string()))?;
        let limiter = Arc::new(RateLimiter::new(cfg.rate_limit));
        Ok(ExplorerClient { cfg, http, limiter })
    }

    pub fn fetch(&self, address: &str) -> Result<SourceUnit, IngestError> {
        let address = validate_address(address)?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.fetch_once(&address) {
                Err(IngestError::RateLimited { retry_after }) if attempt < self.cfg.max_attempts => {
                    let wait = retry_after.unwrap_or(1.0).clamp(0.0, 60.0);
                    tracing::debug!(%address, wait, "explorer rate limited, retrying");
                    std::thread::sleep(Duration::from_secs_f64(wait));
                }
                other => return other,
            }
        }
    }

    fn fetch_once(&self, address: &str) -> Result<SourceUnit, IngestError> {
        self.limiter.acquire();
        let response = self
            .http
            .get(&self.cfg.api_base_url)
            .query(&[
                ("module", "contract"),
                ("action", "getsourcecode"),
                ("address", address),
                ("apikey", self.cfg.api_key.as_str()),
            ])
            .send()
            .map_err(|e| IngestError::Network(e.to_string()))?;
        let status = response.status();
        let retry_after = response
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok());
        if status.as_u16() == 429 {
            return Err(IngestError::RateLimited { retry_after });
        }
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(IngestError::Auth(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(IngestError::Network(format!("HTTP {status}")));
        }
        let body: Value = response.json().map_err(|e| IngestError::Network(format!("invalid response body: {e}")))?;
        parse_source_response(address, &body, retry_after)
    }
}

/// One-shot fetch; batch callers should share an [`ExplorerClient`].
pub fn fetch_verified_source(address: &str, cfg: &FetchConfig) -> Result<SourceUnit, IngestError> {
    validate_address(address)?;
    ExplorerClient::new(cfg.clone())?.fetch(address)
}

fn parse_source_response(address: &str, body: &Value, retry_after: Option<f64>) -> Result<SourceUnit, IngestError> {
    let status = body.get("status").and_then(Value::as_str).unwrap_or("0");
    let result = body.get("result");
    if status != "1" {
        let text = result
            .and_then(Value::as_str)
            .or_else(|| body.get("message").and_then(Value::as_str))
            .unwrap_or("unknown explorer error");
        let lower = text.to_ascii_lowercase();
        return Err(if lower.contains("rate limit") {
            IngestError::RateLimited { retry_after }
        } else if lower.contains("api key") || lower.contains("apikey") {
            IngestError::Auth(text.to_string())
        } else if lower.contains("not verified") {
            IngestError::NotVerified(address.to_string())
        } else {
            IngestError::Network(text.to_string())
        });
    }
    let entry = result
        .and_then(Value::as_array)
        .and_then(|r| r.first())
        .ok_or_else(|| IngestError::Network("explorer response has no result entry".into()))?;
    let source = entry.get("SourceCode").and_then(Value::as_str).unwrap_or_default();
    let abi = entry.get("ABI").and_then(Value::as_str).unwrap_or_default();
    if source.trim().is_empty() || abi.contains("not verified") {
        return Err(IngestError::NotVerified(address.to_string()));
    }
    let text = flatten_sources(source);
    let mut unit = SourceUnit::from_source(address, address, text);
    if let Some(v) = entry.get("CompilerVersion").and_then(Value::as_str) {
        let v = v.trim_start_matches('v');
        if !v.is_empty() {
            unit.compiler_version = Some(v.split('+').next().unwrap_or(v).to_string());
        }
    }
    Ok(unit)
}

/// Flattens a multi-file verified-source payload (`{{ "sources": ... }}` or a
/// bare `{file: {content}}` map) into one text with file-boundary comments.
/// Import directives are commented out; single-file payloads pass through.
pub fn flatten_sources(source: &str) -> String {
    let trimmed = source.trim();
    let json_text =
        if trimmed.starts_with("{{") && trimmed.ends_with("}}") { &trimmed[1..trimmed.len() - 1] } else { trimmed };
    let Ok(Value::Object(doc)) = serde_json::from_str::<Value>(json_text) else {
        return source.to_string();
    };
    let files = match doc.get("sources").and_then(Value::as_object) {
        Some(files) => files.clone(),
        None => doc,
    };
    let mut out = String::new();
    for (name, file) in &files {
        let Some(content) = file.get("content").and_then(Value::as_str) else { continue };
        out.push_str(&format!("// File: {name}\n"));
        for line in content.lines() {
            if line.trim_start().starts_with("import ") {
                out.push_str("// ");
            }
            out.push_str(line);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
