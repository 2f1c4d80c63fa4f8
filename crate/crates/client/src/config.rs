use medvl_core::TaskKind;
use serde::{Deserialize, Serialize};

use crate::error::ClientError;

/// How images reach the endpoint. The client never decodes pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// Send each image_ref as-is as an `image_url`.
    #[default]
    Uri,
    /// Read the file and send a base64 `data:` URL.
    Inline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token. No auth header if unset.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
    #[serde(default)]
    pub image_mode: ImageMode,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_ms: u64,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    4
}
fn default_backoff_base() -> u64 {
    500
}
fn default_backoff_max() -> u64 {
    30_000
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_id: model_id.into(),
            auth_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            parallelism: default_parallelism(),
            requests_per_second: None,
            image_mode: ImageMode::Uri,
            backoff_base_ms: default_backoff_base(),
            backoff_max_ms: default_backoff_max(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let mut problems = Vec::new();
        if self.base_url.trim().is_empty() {
            problems.push("base_url is empty".to_string());
        }
        if self.model_id.trim().is_empty() {
            problems.push("model_id is empty".to_string());
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            problems.push("timeout_secs must be positive".to_string());
        }
        if self.parallelism == 0 {
            problems.push("parallelism must be at least 1".to_string());
        }
        if let Some(rps) = self.requests_per_second {
            if !(rps.is_finite() && rps > 0.0) {
                problems.push("requests_per_second must be positive".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ClientError::Config(problems.join("; ")))
        }
    }

    /// The bearer token, if an auth variable is configured.
    pub fn auth_token(&self) -> Result<Option<String>, ClientError> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ClientError::Config(format!("environment variable {var} is not set"))),
        }
    }

    pub fn chat_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Decoding parameters sent with every request. Part of the cache key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Decoding {
    /// Greedy decoding with an output budget sized to the task.
    pub fn for_task(task: TaskKind) -> Self {
        let max_tokens = match task {
            TaskKind::VqaClosed | TaskKind::Classification => 32,
            TaskKind::VqaOpen => 64,
            TaskKind::Detect2D | TaskKind::Detect3D | TaskKind::Landmark => 64,
            TaskKind::ReportGen => 512,
        };
        Decoding { temperature: 0.0, max_tokens }
    }

    /// Budget for synthesis answers.
    pub fn synthesis() -> Self {
        Decoding { temperature: 0.0, max_tokens: 512 }
    }
}
