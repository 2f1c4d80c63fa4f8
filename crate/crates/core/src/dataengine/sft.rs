use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::record::{Sample, Split, TaskKind};
use crate::templates::{render_label_with, render_with, ExpectedFormat, Message, RenderOptions};

use super::ingest::ingest_split;
use super::manifest::DatasetManifest;
use super::splits::tally_splits;
use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatFormat {
    /// Role-tagged message list.
    #[default]
    Messages,
    /// Single flattened prompt string.
    Prompt,
}

impl std::str::FromStr for ChatFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "messages" => Ok(ChatFormat::Messages),
            "prompt" => Ok(ChatFormat::Prompt),
            other => Err(format!("unknown chat format '{other}' (expected messages or prompt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptBody {
    Messages { messages: Vec<Message> },
    Prompt { prompt: String },
}

/// One instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub task: TaskKind,
    pub image_refs: Vec<String>,
    #[serde(flatten)]
    pub body: PromptBody,
    pub expected_format: ExpectedFormat,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct SftOptions {
    pub seed: u64,
    pub chat_format: ChatFormat,
    pub render: RenderOptions,
    /// Per-dataset shuffle window. Memory is bounded by
    /// `datasets * shuffle_buffer` samples.
    pub shuffle_buffer: usize,
}

impl Default for SftOptions {
    fn default() -> Self {
        SftOptions {
            seed: 0,
            chat_format: ChatFormat::Messages,
            render: RenderOptions::default(),
            shuffle_buffer: 10_000,
        }
    }
}

pub fn render_record(s: &Sample, opts: &SftOptions) -> Result<SftRecord, DataError> {
    let inst = render_with(s, &opts.render)?;
    let body = match opts.chat_format {
        ChatFormat::Messages => PromptBody::Messages { messages: inst.messages.clone() },
        ChatFormat::Prompt => PromptBody::Prompt { prompt: inst.prompt() },
    };
    Ok(SftRecord {
        sample_id: s.id.clone(),
        dataset_id: s.dataset_id.clone(),
        task: s.task,
        image_refs: s.image_refs.clone(),
        body,
        expected_format: inst.expected_format,
        target: render_label_with(&s.ground_truth, s.options(), &opts.render.markers),
    })
}

type SampleIter = Box<dyn Iterator<Item = Result<Sample, DataError>> + Send>;

struct Source {
    iter: SampleIter,
    buffer: Vec<Sample>,
    remaining: u64,
    exhausted: bool,
    rng: ChaCha8Rng,
}

impl Source {
    fn fill(&mut self, cap: usize) -> Result<(), DataError> {
        while !self.exhausted && self.buffer.len() < cap {
            match self.iter.next() {
                Some(s) => self.buffer.push(s?),
                None => self.exhausted = true,
            }
        }
        Ok(())
    }
}

/// Seeded merge of several sample streams.
///
/// At each step a dataset is chosen with probability proportional to the
/// samples it has left, which makes every interleaving of the datasets
/// equally likely. Within a dataset, order is randomized through a bounded
/// shuffle buffer.
pub struct SftStream {
    sources: Vec<Source>,
    rng: ChaCha8Rng,
    opts: SftOptions,
}

impl SftStream {
    /// `sources` pairs each stream with its exact length.
    pub fn new(sources: Vec<(u64, SampleIter)>, opts: SftOptions) -> Self {
        let cap = opts.shuffle_buffer.max(1);
        let sources = sources
            .into_iter()
            .enumerate()
            .map(|(i, (remaining, iter))| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(i as u64 + 1);
                Source {
                    iter,
                    buffer: Vec::with_capacity(cap.min(remaining as usize)),
                    remaining,
                    exhausted: false,
                    rng,
                }
            })
            .collect();
        SftStream { sources, rng: ChaCha8Rng::seed_from_u64(opts.seed), opts }
    }

    /// In-memory datasets, for tests and small corpora.
    pub fn from_samples(datasets: Vec<Vec<Sample>>, opts: SftOptions) -> Self {
        let sources =
            datasets.into_iter().map(|d| (d.len() as u64, Box::new(d.into_iter().map(Ok)) as SampleIter)).collect();
        SftStream::new(sources, opts)
    }

    pub fn total_remaining(&self) -> u64 {
        self.sources.iter().map(|s| s.remaining).sum()
    }

    fn step(&mut self) -> Result<Option<Sample>, DataError> {
        let cap = self.opts.shuffle_buffer.max(1);
        let total = self.total_remaining();
        if total == 0 {
            for (i, src) in self.sources.iter_mut().enumerate() {
                src.fill(1)?;
                if !src.buffer.is_empty() {
                    return Err(DataError::InvalidArgument(format!("source {i} yielded more samples than counted")));
                }
            }
            return Ok(None);
        }
        let mut pick = self.rng.random_range(0..total);
        let idx = self
            .sources
            .iter()
            .position(|s| {
                if pick < s.remaining {
                    true
                } else {
                    pick -= s.remaining;
                    false
                }
            })
            .expect("pick < total");
        let src = &mut self.sources[idx];
        src.fill(cap)?;
        if src.buffer.is_empty() {
            return Err(DataError::InvalidArgument(format!(
                "source {idx} ended with {} samples still expected",
                src.remaining
            )));
        }
        let j = src.rng.random_range(0..src.buffer.len());
        let sample = src.buffer.swap_remove(j);
        src.remaining -= 1;
        Ok(Some(sample))
    }
}

impl Iterator for SftStream {
    type Item = Result<SftRecord, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.step() {
            Ok(Some(s)) => Some(render_record(&s, &self.opts)),
            Ok(None) => None,
            Err(e) => {
                for src in &mut self.sources {
                    src.remaining = 0;
                    src.exhausted = true;
                    src.buffer.clear();
                }
                Some(Err(e))
            }
        }
    }
}

/// The instruction-tuning corpus over the train split of every manifest.
///
/// A first pass ingests and counts each train split, so malformed input
/// fails before any record is produced; the second pass streams.
pub fn build_sft(manifests: &[DatasetManifest], opts: SftOptions) -> Result<SftStream, DataError> {
    let mut sources = Vec::with_capacity(manifests.len());
    for m in manifests {
        let n = tally_splits(ingest_split(m, Split::Train)?)?.train;
        sources.push((n, Box::new(ingest_split(m, Split::Train)?) as SampleIter));
    }
    Ok(SftStream::new(sources, opts))
}
