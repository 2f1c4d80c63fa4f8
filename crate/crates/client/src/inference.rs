use std::sync::atomic::{AtomicU64, Ordering};

use futures::stream::{self, Stream, StreamExt};
use medvl_core::parse::parse_output;
use medvl_core::templates::{render_with, RenderOptions};
use medvl_core::{ParsedOutput, Prediction, Sample};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::cache::{CacheKey, CachedResponse, ResponseCache};
use crate::config::Decoding;
use crate::http::ChatClient;

#[derive(Debug, Clone, Default)]
pub struct InferenceOptions {
    pub render: RenderOptions,
    /// Overrides the per-task decoding defaults.
    pub decoding: Option<Decoding>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub total: u64,
    pub cache_hits: u64,
    /// Completions fetched over the network.
    pub calls: u64,
    pub retries: u64,
    /// Samples whose request failed after retries.
    pub failures: u64,
    pub parse_failures: u64,
}

#[derive(Default)]
struct Counters {
    total: AtomicU64,
    cache_hits: AtomicU64,
    calls: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
    parse_failures: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> InferenceSummary {
        InferenceSummary {
            total: self.total.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            calls: self.calls.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            parse_failures: self.parse_failures.load(Ordering::Relaxed),
        }
    }
}

async fn predict_one(
    sample: &Sample,
    client: &ChatClient,
    cache: Option<&ResponseCache>,
    opts: &InferenceOptions,
    counters: &Counters,
) -> Prediction {
    counters.total.fetch_add(1, Ordering::Relaxed);
    let model_id = client.config().model_id.clone();
    let failed = |msg: String| {
        counters.failures.fetch_add(1, Ordering::Relaxed);
        counters.parse_failures.fetch_add(1, Ordering::Relaxed);
        warn!(sample_id = %sample.id, error = %msg, "inference failed");
        Prediction {
            sample_id: sample.id.clone(),
            raw_text: String::new(),
            parsed: Some(ParsedOutput::ParseFailed(format!("transport: {msg}"))),
            model_id: model_id.clone(),
            latency_ms: 0.0,
            error: Some(msg),
        }
    };

    let inst = match render_with(sample, &opts.render) {
        Ok(i) => i,
        Err(e) => return failed(e.to_string()),
    };
    let decoding = opts.decoding.unwrap_or_else(|| Decoding::for_task(sample.task));
    let key = CacheKey::new(&model_id, &inst.messages, &sample.image_refs, &decoding);

    let cached = match cache.map(|c| c.get(&key)).transpose() {
        Ok(hit) => hit.flatten(),
        Err(e) => {
            warn!(sample_id = %sample.id, error = %e, "cache read failed, treating as miss");
            None
        }
    };
    let response = match cached {
        Some(hit) => {
            counters.cache_hits.fetch_add(1, Ordering::Relaxed);
            hit
        }
        None => match client.chat_complete(&inst.messages, &sample.image_refs, &decoding).await {
            Ok(c) => {
                counters.calls.fetch_add(1, Ordering::Relaxed);
                counters.retries.fetch_add(u64::from(c.retries), Ordering::Relaxed);
                let resp = CachedResponse { raw_text: c.text, latency_ms: c.latency_ms };
                if let Some(cache) = cache {
                    if let Err(e) = cache.put(&key, &resp) {
                        warn!(sample_id = %sample.id, error = %e, "cache write failed");
                    }
                }
                resp
            }
            Err(e) => return failed(e.to_string()),
        },
    };

    let parsed = parse_output(&response.raw_text, inst.expected_format, sample, &opts.render.markers);
    if parsed.is_failed() {
        counters.parse_failures.fetch_add(1, Ordering::Relaxed);
    }
    Prediction {
        sample_id: sample.id.clone(),
        raw_text: response.raw_text,
        parsed: Some(parsed),
        model_id,
        latency_ms: response.latency_ms,
        error: None,
    }
}

/// Predictions in input order, with at most `parallelism` requests in
/// flight. Per-sample failures become failed predictions; the stream never
/// ends early.
pub fn run_inference_stream<'a>(
    samples: impl IntoIterator<Item = &'a Sample> + 'a,
    client: &'a ChatClient,
    cache: Option<&'a ResponseCache>,
    opts: &'a InferenceOptions,
) -> (impl Stream<Item = Prediction> + 'a, impl Fn() -> InferenceSummary + 'a) {
    let counters = std::sync::Arc::new(Counters::default());
    let c2 = std::sync::Arc::clone(&counters);
    let parallelism = client.config().parallelism;
    let s = stream::iter(samples)
        .map(move |sample| {
            let counters = std::sync::Arc::clone(&counters);
            async move { predict_one(sample, client, cache, opts, &counters).await }
        })
        .buffered(parallelism);
    (s, move || c2.snapshot())
}

/// Collects [`run_inference_stream`].
pub async fn run_inference(
    samples: &[Sample],
    client: &ChatClient,
    cache: Option<&ResponseCache>,
    opts: &InferenceOptions,
) -> (Vec<Prediction>, InferenceSummary) {
    let (s, summary) = run_inference_stream(samples, client, cache, opts);
    let preds: Vec<Prediction> = s.collect().await;
    (preds, summary())
}
