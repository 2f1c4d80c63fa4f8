use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use futures::StreamExt;
use medvl_client::{
    run_inference_stream, run_synthesis, ChatClient, EndpointConfig, InferenceOptions, InferenceSummary, ResponseCache,
};
use medvl_core::dataengine::{
    build_sft as build_sft_stream, check_splits, ingest_split, load_manifest_dir, plan_alignment_grouped, read_jsonl,
    write_jsonl, DataError, DatasetManifest, PoolItem, SftOptions, SplitCounts,
};
use medvl_core::metrics::{align, score_family, MetricReport};
use medvl_core::templates::MarkerTokens;
use medvl_core::{Prediction, Sample, Split, TaskFamily};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::cli::{BuildAlignArgs, BuildSftArgs, EndpointArgs, InferArgs};
use crate::config::endpoint_from_arg;
use crate::Outcome;

/// A manifest file, or every `*.toml` in a directory.
pub fn load_manifests(path: &Path) -> Result<Vec<DatasetManifest>> {
    let manifests = if path.is_dir() { load_manifest_dir(path)? } else { vec![DatasetManifest::load(path)?] };
    if manifests.is_empty() {
        bail!("no manifests found in {}", path.display());
    }
    Ok(manifests)
}

pub fn read_all<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let items = read_jsonl::<T>(path)?.map(|r| r.map(|(_, v)| v)).collect::<Result<Vec<_>, DataError>>()?;
    Ok(items)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// JSONL written incrementally to a temporary file and renamed on finish.
struct JsonlSink {
    path: PathBuf,
    tmp: PathBuf,
    w: BufWriter<File>,
}

impl JsonlSink {
    fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(JsonlSink { path: path.to_path_buf(), tmp, w: BufWriter::new(file) })
    }

    fn push<T: Serialize>(&mut self, item: &T) -> Result<()> {
        serde_json::to_writer(&mut self.w, item)?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        drop(self.w);
        std::fs::rename(&self.tmp, &self.path).with_context(|| format!("writing {}", self.path.display()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub actual: SplitCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected: Option<SplitCounts>,
    pub mismatches: Vec<String>,
}

/// Writes `<out>/<dataset>/<split>.jsonl` for every listed split and returns
/// the per-dataset counts.
pub fn ingest_to(manifests: &[DatasetManifest], out: &Path) -> Result<BTreeMap<String, SplitReport>> {
    let mut reports = BTreeMap::new();
    for m in manifests {
        let mut actual = SplitCounts::default();
        for split in Split::ALL {
            if m.split_path(split).is_none() {
                continue;
            }
            let path = out.join(&m.dataset_id).join(format!("{split}.jsonl"));
            let n = write_jsonl::<_, _, DataError>(&path, ingest_split(m, split)?)?;
            actual.add(split, n as u64);
        }
        let mismatches: Vec<String> =
            m.expected.map(|e| check_splits(&actual, &e).iter().map(ToString::to_string).collect()).unwrap_or_default();
        for mm in &mismatches {
            warn!(dataset_id = %m.dataset_id, mismatch = %mm, "split count mismatch");
        }
        info!(dataset_id = %m.dataset_id, train = actual.train, valid = actual.valid, test = actual.test, "ingested");
        reports.insert(m.dataset_id.clone(), SplitReport { actual, expected: m.expected, mismatches });
    }
    write_json(&out.join("splits.json"), &reports)?;
    Ok(reports)
}

/// Split mismatches are reported in `splits.json` and logged; they do not
/// fail the command.
pub fn ingest(manifest: &Path, out: &Path) -> Result<Outcome> {
    let manifests = load_manifests(manifest)?;
    ingest_to(&manifests, out)?;
    Ok(Outcome::Success)
}

pub fn build_sft_to(manifests: &[DatasetManifest], opts: SftOptions, out: &Path) -> Result<usize> {
    let stream = build_sft_stream(manifests, opts)?;
    let n = write_jsonl::<_, _, DataError>(out, stream)?;
    info!(records = n, path = %out.display(), "instruction corpus written");
    Ok(n)
}

pub fn build_sft(args: &BuildSftArgs, seed: u64) -> Result<Outcome> {
    if args.shuffle_buffer == 0 {
        bail!("--shuffle-buffer must be at least 1");
    }
    let manifests = load_manifests(&args.manifest)?;
    let opts =
        SftOptions { seed, chat_format: args.chat_format, shuffle_buffer: args.shuffle_buffer, ..Default::default() };
    build_sft_to(&manifests, opts, &args.out)?;
    Ok(Outcome::Success)
}

/// Endpoint from `--endpoint`/`--model`, with `--parallelism` applied.
pub fn endpoint_config(args: &EndpointArgs) -> Result<Option<EndpointConfig>> {
    let Some(ep) = &args.endpoint else {
        if args.model.is_some() {
            bail!("--model given without --endpoint");
        }
        return Ok(None);
    };
    let mut cfg = endpoint_from_arg(ep, args.model.as_deref())?;
    if let Some(p) = args.parallelism {
        cfg.parallelism = p;
    }
    Ok(Some(cfg))
}

fn open_cache(dir: Option<&Path>) -> Result<Option<ResponseCache>> {
    dir.map(|d| ResponseCache::open(d).with_context(|| format!("opening cache {}", d.display()))).transpose()
}

pub async fn build_align(args: &BuildAlignArgs, seed: u64) -> Result<Outcome> {
    let endpoint = endpoint_config(&args.endpoint)?;
    let client = endpoint.map(ChatClient::new).transpose()?;
    let cache = open_cache(args.endpoint.cache_dir.as_deref())?;

    let pool: Vec<PoolItem> = read_all(&args.pool)?;
    let plan = plan_alignment_grouped(&pool, seed, args.synthetic_fraction, args.group_size)?;
    write_jsonl::<_, _, DataError>(&args.out.join("paired.jsonl"), plan.paired.iter().map(Ok))?;
    write_jsonl::<_, _, DataError>(&args.out.join("jobs.jsonl"), plan.jobs.iter().map(Ok))?;
    info!(paired = plan.paired.len(), jobs = plan.jobs.len(), "alignment plan written");

    let Some(client) = client else {
        return Ok(Outcome::Success);
    };
    let (samples, summary) = run_synthesis(&plan.jobs, &client, cache.as_ref()).await;
    write_jsonl::<_, _, DataError>(&args.out.join("synthetic.jsonl"), samples.iter().map(Ok))?;
    write_json(&args.out.join("synthesis_summary.json"), &summary)?;
    info!(succeeded = summary.succeeded, failed = summary.failed, cache_hits = summary.cache_hits, "synthesis done");
    Ok(Outcome::partial_if(summary.failed > 0))
}

/// Streams predictions for `samples` into `out` in input order.
pub async fn infer_to(
    samples: &[Sample],
    client: &ChatClient,
    cache: Option<&ResponseCache>,
    out: &Path,
) -> Result<InferenceSummary> {
    let opts = InferenceOptions::default();
    let (stream, summary) = run_inference_stream(samples, client, cache, &opts);
    let mut stream = std::pin::pin!(stream);
    let mut sink = JsonlSink::create(out)?;
    let mut written = 0usize;
    while let Some(p) = stream.next().await {
        sink.push(&p)?;
        written += 1;
        if written.is_multiple_of(1000) {
            info!(written, total = samples.len(), "inference progress");
        }
    }
    sink.finish()?;
    let summary = summary();
    write_json(&summary_path(out), &summary)?;
    info!(
        total = summary.total,
        calls = summary.calls,
        cache_hits = summary.cache_hits,
        retries = summary.retries,
        failures = summary.failures,
        parse_failures = summary.parse_failures,
        "inference done"
    );
    Ok(summary)
}

/// `predictions.jsonl` -> `predictions.summary.json`.
pub fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

pub async fn infer(args: &InferArgs) -> Result<Outcome> {
    let Some(cfg) = endpoint_config(&args.endpoint)? else {
        bail!("infer requires --endpoint");
    };
    let client = ChatClient::new(cfg)?;
    let cache = open_cache(args.endpoint.cache_dir.as_deref())?;
    let samples: Vec<Sample> = read_all(&args.samples)?;
    let summary = infer_to(&samples, &client, cache.as_ref(), &args.out).await?;
    Ok(Outcome::partial_if(summary.failures > 0))
}

/// File-name-safe form of an identifier.
pub fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_') { c } else { '_' }).collect()
}

pub fn metric_file_name(r: &MetricReport) -> String {
    format!("{}.{}.{}.json", sanitize(&r.dataset_id), r.task, sanitize(&r.model_id))
}

/// Scores every (model, dataset, task family) group. Each model's
/// predictions must cover exactly the ground-truth ids.
pub fn score_all(preds: &[Prediction], samples: &[Sample], spacing: f64) -> Result<Vec<MetricReport>> {
    if preds.is_empty() {
        bail!("prediction file is empty");
    }
    let mut by_model: BTreeMap<&str, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        by_model.entry(p.model_id.as_str()).or_default().push(p.clone());
    }
    let markers = MarkerTokens::default();
    let mut reports = Vec::new();
    for (model, preds) in &by_model {
        let aligned = align(preds, samples, &markers).with_context(|| format!("model {model}"))?;
        let mut groups: BTreeMap<(&str, TaskFamily), Vec<_>> = BTreeMap::new();
        for item in aligned {
            groups.entry((item.sample.dataset_id.as_str(), item.sample.task.family())).or_default().push(item);
        }
        for ((ds, family), items) in groups {
            let r = score_family(ds, model, family, &items, spacing)
                .with_context(|| format!("scoring {ds} {family} for {model}"))?;
            reports.push(r);
        }
    }
    Ok(reports)
}

pub fn score_to(preds: &[Prediction], samples: &[Sample], out: &Path, spacing: f64) -> Result<Vec<PathBuf>> {
    let reports = score_all(preds, samples, spacing)?;
    let mut paths = Vec::with_capacity(reports.len());
    for r in &reports {
        for v in r.violations() {
            warn!(dataset_id = %r.dataset_id, task = %r.task, violation = %v, "metric report violation");
        }
        let path = out.join(metric_file_name(r));
        write_json(&path, r)?;
        info!(dataset_id = %r.dataset_id, task = %r.task, model_id = %r.model_id, n = r.n_samples, "scored");
        paths.push(path);
    }
    Ok(paths)
}

pub fn score(predictions: &Path, ground_truth: &Path, out: &Path, spacing: f64) -> Result<Outcome> {
    if !(spacing.is_finite() && spacing > 0.0) {
        bail!("--spacing must be positive");
    }
    let preds: Vec<Prediction> = read_all(predictions)?;
    let samples: Vec<Sample> = read_all(ground_truth)?;
    score_to(&preds, &samples, out, spacing)?;
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanitize_keeps_safe_chars() {
        assert_eq!(sanitize("IU-Xray"), "IU-Xray");
        assert_eq!(sanitize("org/model v1.5"), "org_model_v1_5");
    }

    #[test]
    fn summary_path_swaps_extension() {
        assert_eq!(summary_path(Path::new("run/predictions.jsonl")), PathBuf::from("run/predictions.summary.json"));
    }
}
