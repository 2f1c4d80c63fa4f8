use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine;
use medvl_core::templates::{Message, Role, IMAGE_PLACEHOLDER};
use rand::Rng;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::Mutex;
use tracing::{debug, warn};

use crate::config::{Decoding, EndpointConfig, ImageMode};
use crate::error::ClientError;

/// One successful completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Attempts beyond the first.
    pub retries: u32,
    pub latency_ms: f64,
}

/// Spaces request starts at least `1 / rps` apart.
#[derive(Debug)]
struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(rps: Option<f64>) -> Self {
        RateLimiter { interval: rps.map(|r| Duration::from_secs_f64(1.0 / r)), next: Mutex::new(Instant::now()) }
    }

    async fn acquire(&self) {
        let Some(interval) = self.interval else { return };
        let slot = {
            let mut next = self.next.lock().await;
            let slot = (*next).max(Instant::now());
            *next = slot + interval;
            slot
        };
        tokio::time::sleep_until(slot.into()).await;
    }
}

#[derive(Debug)]
pub struct ChatClient {
    http: reqwest::Client,
    cfg: EndpointConfig,
    token: Option<String>,
    limiter: RateLimiter,
}

impl ChatClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let token = cfg.auth_token()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(ChatClient { http, limiter: RateLimiter::new(cfg.requests_per_second), cfg, token })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// The request body. Images are attached to the last user message, and
    /// `<image>` placeholders are removed from its text.
    pub fn request_body(
        &self,
        messages: &[Message],
        image_refs: &[String],
        decoding: &Decoding,
    ) -> Result<Value, ClientError> {
        let last_user = messages.iter().rposition(|m| m.role == Role::User);
        let mut wire = Vec::with_capacity(messages.len());
        for (i, m) in messages.iter().enumerate() {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
            };
            if Some(i) == last_user && !image_refs.is_empty() {
                let mut parts = Vec::with_capacity(image_refs.len() + 1);
                for r in image_refs {
                    parts.push(json!({"type": "image_url", "image_url": {"url": self.image_url(r)?}}));
                }
                parts.push(json!({"type": "text", "text": strip_placeholders(&m.content)}));
                wire.push(json!({"role": role, "content": parts}));
            } else {
                wire.push(json!({"role": role, "content": strip_placeholders(&m.content)}));
            }
        }
        Ok(json!({
            "model": self.cfg.model_id,
            "messages": wire,
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_tokens,
        }))
    }

    fn image_url(&self, image_ref: &str) -> Result<String, ClientError> {
        match self.cfg.image_mode {
            ImageMode::Uri => Ok(image_ref.to_string()),
            ImageMode::Inline => {
                let path = image_ref.strip_prefix("file://").unwrap_or(image_ref);
                let bytes = std::fs::read(path)
                    .map_err(|e| ClientError::Image { image_ref: image_ref.to_string(), message: e.to_string() })?;
                let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                Ok(format!("data:{};base64,{b64}", mime_for(Path::new(path))))
            }
        }
    }

    /// Sends one chat completion, retrying transient failures.
    pub async fn chat_complete(
        &self,
        messages: &[Message],
        image_refs: &[String],
        decoding: &Decoding,
    ) -> Result<Completion, ClientError> {
        let body = self.request_body(messages, image_refs, decoding)?;
        let url = self.cfg.chat_url();
        let mut retries = 0u32;
        loop {
            self.limiter.acquire().await;
            let started = Instant::now();
            let outcome = self.attempt(&url, &body).await;
            let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
            let (err, retry_after) = match outcome {
                Ok(text) => return Ok(Completion { text, retries, latency_ms }),
                Err(e) => e,
            };
            if !err.is_transient() || retries >= self.cfg.max_retries {
                return Err(finalize(err, retries));
            }
            let wait = retry_after.unwrap_or_else(|| self.backoff(retries));
            warn!(error = %err, retry = retries + 1, wait_ms = wait.as_millis() as u64, "transient failure, retrying");
            tokio::time::sleep(wait).await;
            retries += 1;
        }
    }

    /// Exponential backoff with jitter in [0.5, 1.0) of the nominal delay.
    fn backoff(&self, retries: u32) -> Duration {
        let nominal = self.cfg.backoff_base_ms.saturating_mul(1u64 << retries.min(20)).min(self.cfg.backoff_max_ms);
        let factor: f64 = rand::rng().random_range(0.5..1.0);
        Duration::from_secs_f64(nominal as f64 * factor / 1000.0)
    }

    async fn attempt(&self, url: &str, body: &Value) -> Result<String, (ClientError, Option<Duration>)> {
        let mut req = self.http.post(url).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().await.map_err(|e| (transport(e), None))?;
        let status = resp.status();
        if status.is_success() {
            let v: Value = resp.json().await.map_err(|e| (ClientError::Malformed(e.to_string()), None))?;
            return extract_text(&v).map_err(|e| (e, None));
        }
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|h| h.to_str().ok())
            .and_then(|s| s.trim().parse::<f64>().ok())
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(|s| Duration::from_secs_f64(s.min(self.cfg.backoff_max_ms as f64 / 1000.0)));
        let text = resp.text().await.unwrap_or_default();
        let body: String = text.chars().take(500).collect();
        debug!(status = status.as_u16(), "non-success response");
        Err((classify(status, body), retry_after))
    }
}

fn transport(e: reqwest::Error) -> ClientError {
    if e.is_timeout() {
        ClientError::Timeout { attempts: 1 }
    } else {
        ClientError::Transport(e.to_string())
    }
}

fn classify(status: StatusCode, body: String) -> ClientError {
    let code = status.as_u16();
    match status {
        StatusCode::TOO_MANY_REQUESTS => ClientError::RateLimited { retries: 0 },
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => ClientError::AuthFailed { status: code },
        StatusCode::REQUEST_TIMEOUT => ClientError::Timeout { attempts: 1 },
        s if s.is_server_error() => ClientError::Server { status: code, retries: 0, body },
        _ => ClientError::BadRequest { status: code, body },
    }
}

/// Stamps the final retry count onto a terminal error.
fn finalize(err: ClientError, retries: u32) -> ClientError {
    match err {
        ClientError::RateLimited { .. } => ClientError::RateLimited { retries },
        ClientError::Server { status, body, .. } => ClientError::Server { status, retries, body },
        ClientError::Timeout { .. } => ClientError::Timeout { attempts: retries + 1 },
        other => other,
    }
}

fn extract_text(v: &Value) -> Result<String, ClientError> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| ClientError::Malformed("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            Ok(parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join(""))
        }
        Value::Null => Ok(String::new()),
        other => Err(ClientError::Malformed(format!("unexpected content {other}"))),
    }
}

fn strip_placeholders(text: &str) -> String {
    let with_space = format!("{IMAGE_PLACEHOLDER} ");
    text.replace(&with_space, "").replace(IMAGE_PLACEHOLDER, "")
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("tif" | "tiff") => "image/tiff",
        _ => "application/octet-stream",
    }
}
