//! Corpus construction: dataset ingest, split bookkeeping, feature-alignment
//! planning and the instruction-tuning mixture.
//!
//! Everything here streams JSON Lines so that corpora of millions of records
//! run in bounded memory.

mod alignment;
mod ingest;
mod jsonl;
mod manifest;
mod sft;
mod splits;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::templates::RenderError;

pub use alignment::{
    assemble_alignment, plan_alignment, plan_alignment_grouped, synthesis_prompt, AlignmentMix, AlignmentPlan,
    AlignmentSample, Origin, PoolItem, SynthesisJob, DEFAULT_GROUP_SIZE,
};
pub use ingest::{ingest, ingest_split, Ingest};
pub use jsonl::{read_jsonl, write_jsonl, JsonlReader};
pub use manifest::{load_manifest_dir, BoxUnits, DatasetManifest, SourceFormat, SplitCounts, SplitPaths};
pub use sft::{build_sft, render_record, ChatFormat, PromptBody, SftOptions, SftRecord, SftStream};
pub use splits::{check_splits, count_splits, tally_splits, SplitMismatch};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("dataset {dataset_id}: no image dimensions for '{image_ref}'")]
    MissingDimensions { dataset_id: String, image_ref: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("insufficient pool: {needed} distinct images needed, {available} available")]
    InsufficientPool { needed: usize, available: usize },
    #[error("synthesis job {job_id}: empty answer")]
    EmptyAnswer { job_id: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Render(#[from] RenderError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn format(path: &Path, line: usize, message: impl Into<String>) -> Self {
        DataError::Format { path: path.to_path_buf(), line, message: message.into() }
    }

    pub(crate) fn csv(path: &Path, e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(source) => DataError::io(path, source),
            other => DataError::format(path, line, format!("{other:?}")),
        }
    }
}
