//! Batch client for OpenAI-compatible chat-completions endpoints.
//!
//! Covers model inference over rendered samples, compare-and-contrast
//! synthesis for alignment data, a content-addressed response cache, and an
//! in-process mock server for tests.

mod cache;
mod config;
mod error;
mod http;
mod inference;
pub mod mock;
mod synthesis;

pub use cache::{CacheKey, CachedResponse, ResponseCache};
pub use config::{Decoding, EndpointConfig, ImageMode};
pub use error::ClientError;
pub use http::{ChatClient, Completion};
pub use inference::{run_inference, run_inference_stream, InferenceOptions, InferenceSummary};
pub use synthesis::{run_synthesis, SynthesisSummary};
