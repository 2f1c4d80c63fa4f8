use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("server error {status} after {retries} retries: {body}")]
    Server { status: u16, retries: u32, body: String },
    #[error("bad request ({status}): {body}")]
    BadRequest { status: u16, body: String },
    #[error("authentication failed ({status})")]
    AuthFailed { status: u16 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("image {image_ref}: {message}")]
    Image { image_ref: String, message: String },
    #[error("cache: {0}")]
    Cache(String),
    #[error("config: {0}")]
    Config(String),
}

impl ClientError {
    /// Statuses and failures worth another attempt.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            ClientError::Timeout { .. }
                | ClientError::RateLimited { .. }
                | ClientError::Server { .. }
                | ClientError::Transport(_)
        )
    }
}
