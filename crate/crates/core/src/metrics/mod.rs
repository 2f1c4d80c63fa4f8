//! Scoring functions and the per-dataset metric report.
//!
//! All corpus aggregations are order independent: per-item values are sorted
//! before they are summed, so permuting the input never changes a result.

mod accuracy;
mod geometry;
mod landmark;
mod report;
mod text;

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::parse::parse_for_sample;
use crate::record::{ParsedOutput, Prediction, Sample};
use crate::templates::MarkerTokens;

pub use accuracy::{accuracy, token_recall, AccuracyMode};
pub use geometry::{iou2d, iou3d, mean_iou, BoxDim};
pub use landmark::{landmark_errors, mre, sdr, DEFAULT_SPACING_MM_PER_PX, SDR_THRESHOLDS_MM};
pub use report::{keys, score_family, MetricReport};
pub use text::{bleu, cider_d, meteor, meteor_pair, rouge_l, rouge_l_pair, rouge_l_tokens, CIDER_SIGMA};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("predictions and ground truth do not align: missing {missing:?}, extra {extra:?}")]
    Alignment { missing: Vec<String>, extra: Vec<String> },
    #[error("length mismatch: {preds} predictions vs {refs} references")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("empty input")]
    Empty,
    #[error("degenerate reference: {0}")]
    DegenerateReference(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("corpus too small: {0} pairs, at least 2 required")]
    CorpusTooSmall(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One prediction paired with its ground-truth sample.
#[derive(Debug, Clone)]
pub struct Aligned<'a> {
    pub sample: &'a Sample,
    pub output: ParsedOutput,
}

/// Pairs predictions with samples by id, in sample order.
///
/// Predictions without a `parsed` field are parsed here with `markers`.
/// Any id present on only one side is an alignment error.
pub fn align<'a>(
    preds: &'a [Prediction],
    samples: &'a [Sample],
    markers: &MarkerTokens,
) -> Result<Vec<Aligned<'a>>, MetricError> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let sample_ids: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();

    let mut missing: Vec<String> =
        samples.iter().filter(|s| !by_id.contains_key(s.id.as_str())).map(|s| s.id.clone()).collect();
    let mut extra: Vec<String> =
        preds.iter().filter(|p| !sample_ids.contains(p.sample_id.as_str())).map(|p| p.sample_id.clone()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        missing.sort();
        extra.sort();
        extra.dedup();
        return Err(MetricError::Alignment { missing, extra });
    }
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }

    Ok(samples
        .iter()
        .map(|s| {
            let p = by_id[s.id.as_str()];
            let output = match &p.parsed {
                Some(out) if out.fits_task(s.task) => out.clone(),
                Some(_) => ParsedOutput::ParseFailed("output variant does not match task".into()),
                None if p.error.is_some() => {
                    ParsedOutput::ParseFailed(format!("transport: {}", p.error.as_deref().unwrap_or("")))
                }
                None => parse_for_sample(&p.raw_text, s, markers),
            };
            Aligned { sample: s, output }
        })
        .collect())
}

/// Order-independent sum: sort, then compensated summation.
pub(crate) fn stable_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn stable_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(stable_sum(values) / values.len() as f64)
    }
}

pub(crate) fn check_lengths(preds: usize, refs: usize) -> Result<(), MetricError> {
    if preds != refs {
        return Err(MetricError::LengthMismatch { preds, refs });
    }
    if preds == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}
