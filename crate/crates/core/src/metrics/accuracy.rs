use crate::parse::{answer_tokens, normalize_answer};
use crate::record::{GroundTruth, ParsedOutput};

use super::{Aligned, MetricError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyMode {
    /// Normalized text equality.
    Exact,
    /// Option index equality.
    Choice,
}

fn is_correct(item: &Aligned<'_>, mode: AccuracyMode) -> bool {
    match (mode, &item.output, &item.sample.ground_truth) {
        (AccuracyMode::Choice, ParsedOutput::Choice(p), GroundTruth::Choice(g)) => p == g,
        (AccuracyMode::Exact, ParsedOutput::Text(p), _) => match item.sample.answer_text() {
            Some(g) => normalize_answer(p) == normalize_answer(g),
            None => false,
        },
        (AccuracyMode::Exact, ParsedOutput::Choice(p), GroundTruth::Choice(g)) => p == g,
        _ => false,
    }
}

/// Percentage of correct items. Parse failures count as incorrect.
pub fn accuracy(items: &[Aligned<'_>], mode: AccuracyMode) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = items.iter().filter(|it| is_correct(it, mode)).count();
    Ok(100.0 * correct as f64 / items.len() as f64)
}

/// Fraction of distinct ground-truth tokens that appear in the prediction.
pub fn token_recall(pred: &str, gt: &str) -> Result<f64, MetricError> {
    let mut gt_tokens = answer_tokens(gt);
    gt_tokens.sort();
    gt_tokens.dedup();
    if gt_tokens.is_empty() {
        return Err(MetricError::DegenerateReference(format!("'{gt}' normalizes to nothing")));
    }
    let pred_tokens: std::collections::HashSet<String> = answer_tokens(pred).into_iter().collect();
    let hit = gt_tokens.iter().filter(|t| pred_tokens.contains(*t)).count();
    Ok(hit as f64 / gt_tokens.len() as f64)
}
