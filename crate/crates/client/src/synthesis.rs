use futures::stream::{self, StreamExt};
use medvl_core::dataengine::{assemble_alignment, AlignmentSample, SynthesisJob};
use medvl_core::templates::{Message, Role};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::cache::{CacheKey, CachedResponse, ResponseCache};
use crate::config::Decoding;
use crate::http::ChatClient;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub total: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub cache_hits: u64,
    pub calls: u64,
    /// `(job_id, error)` for each skipped job.
    pub failures: Vec<(String, String)>,
}

enum Outcome {
    Done(AlignmentSample, bool),
    Failed(String, String),
}

async fn synthesize(job: &SynthesisJob, client: &ChatClient, cache: Option<&ResponseCache>) -> Outcome {
    let messages = vec![Message { role: Role::User, content: job.prompt.clone() }];
    let decoding = Decoding::synthesis();
    let key = CacheKey::new(&client.config().model_id, &messages, &job.image_refs, &decoding);
    let hit = cache.and_then(|c| c.get(&key).ok().flatten());
    let (text, from_cache) = match hit {
        Some(h) => (h.raw_text, true),
        None => match client.chat_complete(&messages, &job.image_refs, &decoding).await {
            Ok(c) => {
                if let Some(cache) = cache {
                    let entry = CachedResponse { raw_text: c.text.clone(), latency_ms: c.latency_ms };
                    if let Err(e) = cache.put(&key, &entry) {
                        warn!(job_id = %job.job_id, error = %e, "cache write failed");
                    }
                }
                (c.text, false)
            }
            Err(e) => return Outcome::Failed(job.job_id.clone(), e.to_string()),
        },
    };
    match assemble_alignment(job, &text) {
        Ok(s) => Outcome::Done(s, from_cache),
        Err(e) => Outcome::Failed(job.job_id.clone(), e.to_string()),
    }
}

/// Answers every job; failed jobs are logged and skipped. Output follows
/// job order.
pub async fn run_synthesis(
    jobs: &[SynthesisJob],
    client: &ChatClient,
    cache: Option<&ResponseCache>,
) -> (Vec<AlignmentSample>, SynthesisSummary) {
    let outcomes: Vec<Outcome> = stream::iter(jobs)
        .map(|job| synthesize(job, client, cache))
        .buffered(client.config().parallelism)
        .collect()
        .await;
    let mut summary = SynthesisSummary { total: jobs.len() as u64, ..Default::default() };
    let mut out = Vec::with_capacity(jobs.len());
    for o in outcomes {
        match o {
            Outcome::Done(s, from_cache) => {
                summary.succeeded += 1;
                if from_cache {
                    summary.cache_hits += 1;
                } else {
                    summary.calls += 1;
                }
                out.push(s);
            }
            Outcome::Failed(job_id, err) => {
                warn!(job_id = %job_id, error = %err, "synthesis job skipped");
                summary.failed += 1;
                summary.failures.push((job_id, err));
            }
        }
    }
    (out, summary)
}
