//! Sequential, resumable run of every stage.
//!
//! Each finished stage leaves `<out>/.stages/<stage>.done`. A rerun skips a
//! stage whose marker and outputs exist; rerunning a stage invalidates the
//! markers of every later stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use medvl_client::{ChatClient, ResponseCache};
use medvl_core::dataengine::{write_jsonl, DataError, DatasetManifest, SftOptions};
use medvl_core::templates::{render_with, RenderOptions};
use medvl_core::{Prediction, Sample};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::info;

use crate::cli::PipelineArgs;
use crate::commands::{build_sft_to, infer_to, ingest_to, load_manifests, read_all, score_to, write_json};
use crate::config::{endpoint_from_arg, RunConfig};
use crate::report::{load_reports, write_report};
use crate::{CliError, Outcome};

pub const STAGES: [&str; 6] = ["ingest", "build-sft", "render", "infer", "score", "report"];

/// Where every stage reads and writes under the run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }
    pub fn ingest_dir(&self) -> PathBuf {
        self.root.join("ingest")
    }
    pub fn sft(&self) -> PathBuf {
        self.root.join("sft.jsonl")
    }
    pub fn test_samples(&self) -> PathBuf {
        self.root.join("test_samples.jsonl")
    }
    pub fn test_rendered(&self) -> PathBuf {
        self.root.join("test_rendered.jsonl")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.jsonl")
    }
    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn marker(&self, stage: &str) -> PathBuf {
        self.root.join(".stages").join(format!("{stage}.done"))
    }

    fn outputs(&self, stage: &str) -> Vec<PathBuf> {
        match stage {
            "ingest" => vec![self.ingest_dir().join("splits.json")],
            "build-sft" => vec![self.sft()],
            "render" => vec![self.test_samples(), self.test_rendered()],
            "infer" => vec![self.predictions()],
            "score" => vec![self.metrics_dir()],
            "report" => vec![self.report_dir().join("report.md")],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub partial: bool,
    #[serde(default)]
    pub detail: Value,
}

fn completed(layout: &Layout, stage: &str) -> Option<StageRecord> {
    let text = std::fs::read_to_string(layout.marker(stage)).ok()?;
    let rec: StageRecord = serde_json::from_str(&text).ok()?;
    layout.outputs(stage).iter().all(|p| p.exists()).then_some(rec)
}

/// Applies command-line overrides to the loaded config.
fn resolve_config(args: &PipelineArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = &args.manifest {
        cfg.manifests = m.clone();
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(f) = args.chat_format {
        cfg.chat_format = f;
    }
    if let Some(c) = &args.endpoint.cache_dir {
        cfg.cache_dir = Some(c.clone());
    }
    let ep = &args.endpoint;
    if let Some(url) = &ep.endpoint {
        cfg.endpoint = Some(endpoint_from_arg(url, ep.model.as_deref())?);
    } else if let (Some(m), Some(e)) = (&ep.model, cfg.endpoint.as_mut()) {
        e.model_id = m.clone();
    }
    if let (Some(p), Some(e)) = (ep.parallelism, cfg.endpoint.as_mut()) {
        e.parallelism = p;
    }
    Ok(cfg)
}

struct Run {
    cfg: RunConfig,
    layout: Layout,
    manifests: Vec<DatasetManifest>,
    client: ChatClient,
}

impl Run {
    async fn stage(&self, stage: &str) -> Result<StageRecord> {
        let (partial, detail) = match stage {
            "ingest" => {
                let reports = ingest_to(&self.manifests, &self.layout.ingest_dir())?;
                (false, serde_json::to_value(reports)?)
            }
            "build-sft" => {
                let opts = SftOptions {
                    seed: self.cfg.seed,
                    chat_format: self.cfg.chat_format,
                    shuffle_buffer: self.cfg.shuffle_buffer,
                    ..Default::default()
                };
                let n = build_sft_to(&self.manifests, opts, &self.layout.sft())?;
                (false, json!({ "records": n }))
            }
            "render" => (false, self.render_test()?),
            "infer" => {
                let samples: Vec<Sample> = read_all(&self.layout.test_samples())?;
                let cache = ResponseCache::open(self.cfg.cache_dir())?;
                let summary = infer_to(&samples, &self.client, Some(&cache), &self.layout.predictions()).await?;
                (summary.failures > 0, serde_json::to_value(summary)?)
            }
            "score" => {
                let dir = self.layout.metrics_dir();
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
                }
                std::fs::create_dir_all(&dir)?;
                let preds: Vec<Prediction> = read_all(&self.layout.predictions())?;
                let samples: Vec<Sample> = read_all(&self.layout.test_samples())?;
                let files = score_to(&preds, &samples, &dir, self.cfg.spacing_mm_per_px)?;
                (false, json!({ "metric_files": files.len() }))
            }
            "report" => {
                let reports = load_reports(&self.layout.metrics_dir())?;
                let rendered = write_report(&reports, &self.layout.report_dir())?;
                (false, json!({ "tables": rendered.tables.len() }))
            }
            other => bail!("unknown stage {other}"),
        };
        Ok(StageRecord { stage: stage.to_string(), partial, detail })
    }

    /// Test splits of every dataset, in manifest order, plus their rendered
    /// instructions.
    fn render_test(&self) -> Result<Value> {
        let mut samples = Vec::new();
        for m in &self.manifests {
            let path = self.layout.ingest_dir().join(&m.dataset_id).join("test.jsonl");
            if path.exists() {
                samples.extend(read_all::<Sample>(&path)?);
            }
        }
        if samples.is_empty() {
            bail!("no dataset has a test split");
        }
        let opts = RenderOptions::default();
        write_jsonl::<_, _, DataError>(
            &self.layout.test_rendered(),
            samples.iter().map(|s| render_with(s, &opts).map_err(DataError::from)),
        )?;
        write_jsonl::<_, _, DataError>(&self.layout.test_samples(), samples.iter().map(Ok))?;
        Ok(json!({ "test_samples": samples.len() }))
    }
}

pub async fn run_pipeline(args: &PipelineArgs, seed: Option<u64>) -> Result<Outcome> {
    let cfg = resolve_config(args, seed)?;
    cfg.validate()?;
    let manifests = load_manifests(&cfg.manifests)?;
    let client = ChatClient::new(cfg.endpoint.clone().expect("validated"))?;
    let layout = Layout::new(&cfg.out_dir);
    let run = Run { cfg, layout, manifests, client };

    let mut outcome = Outcome::Success;
    let mut rerun = false;
    for (i, stage) in STAGES.iter().enumerate() {
        if !rerun {
            if let Some(rec) = completed(&run.layout, stage) {
                info!(stage, "stage already complete, skipping");
                outcome = outcome.max(Outcome::partial_if(rec.partial));
                continue;
            }
            for later in &STAGES[i..] {
                let _ = std::fs::remove_file(run.layout.marker(later));
            }
            rerun = true;
        }
        info!(stage, "stage starting");
        let rec = run.stage(stage).await.map_err(|source| CliError::Stage { stage, index: i as u8, source })?;
        outcome = outcome.max(Outcome::partial_if(rec.partial));
        write_json(&run.layout.marker(stage), &rec)?;
        info!(stage, partial = rec.partial, "stage done");
    }
    Ok(outcome)
}
