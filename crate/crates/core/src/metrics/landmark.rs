use crate::record::{GroundTruth, ParsedOutput};

use super::{stable_mean, Aligned, MetricError};

/// Pixel spacing assumed when neither the sample nor the caller provides one.
pub const DEFAULT_SPACING_MM_PER_PX: f64 = 0.1;

/// Success-detection thresholds in millimetres, in report column order.
pub const SDR_THRESHOLDS_MM: [f64; 4] = [2.0, 2.5, 3.0, 4.0];

/// Radial error in millimetres for every item. Parse failures map to
/// `f64::INFINITY`.
///
/// Spacing comes from the ground-truth point when present, else from
/// `default_spacing`.
pub fn landmark_errors(items: &[Aligned<'_>], default_spacing: f64) -> Result<Vec<f64>, MetricError> {
    if !(default_spacing.is_finite() && default_spacing > 0.0) {
        return Err(MetricError::InvalidArgument(format!("spacing must be positive, got {default_spacing}")));
    }
    Ok(items
        .iter()
        .map(|item| {
            let gt = match &item.sample.ground_truth {
                GroundTruth::Points(p) if !p.is_empty() => &p[0].point,
                _ => return f64::INFINITY,
            };
            let pred = match &item.output {
                ParsedOutput::Points(p) if !p.is_empty() => &p[0].point,
                _ => return f64::INFINITY,
            };
            let spacing = gt.spacing_mm_per_px.unwrap_or(default_spacing);
            pred.distance(gt) * spacing
        })
        .collect())
}

/// Mean radial error over finite errors, with the number excluded.
pub fn mre(errors: &[f64]) -> Result<(f64, usize), MetricError> {
    if errors.is_empty() {
        return Err(MetricError::Empty);
    }
    let finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    let excluded = errors.len() - finite.len();
    match stable_mean(&finite) {
        Some(m) => Ok((m, excluded)),
        None => Err(MetricError::DegenerateInput(format!("all {excluded} errors are unparsed; MRE undefined"))),
    }
}

/// Percentage of errors at or below each threshold. Infinite errors count
/// in the denominator only.
pub fn sdr(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = errors.len() as f64;
    Ok(thresholds.iter().map(|t| 100.0 * errors.iter().filter(|e| **e <= *t).count() as f64 / n).collect())
}
