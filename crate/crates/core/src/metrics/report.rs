use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::parse::answer_tokens;
use crate::record::{ParsedOutput, TaskFamily, TaskKind};

use super::accuracy::{accuracy, token_recall, AccuracyMode};
use super::geometry::{mean_iou, BoxDim};
use super::landmark::{landmark_errors, mre, sdr, SDR_THRESHOLDS_MM};
use super::text::{bleu, cider_d, meteor, rouge_l};
use super::{stable_mean, Aligned, MetricError};

/// Metric names used in [`MetricReport::values`].
pub mod keys {
    pub const OPEN: &str = "open";
    pub const CLOSE: &str = "close";
    pub const TOTAL: &str = "total";
    pub const OPEN_TOKEN_RECALL: &str = "open_token_recall";
    pub const ACCURACY: &str = "accuracy";
    pub const BLEU: &str = "bleu";
    pub const ROUGE_L: &str = "rouge_l";
    pub const METEOR: &str = "meteor";
    pub const CIDER: &str = "cider";
    pub const MEAN_IOU: &str = "mean_iou";
    pub const MRE: &str = "mre";
    pub const MRE_EXCLUDED: &str = "mre_excluded";

    /// Key for the success-detection rate at `threshold_mm`, e.g. `sdr_2.5mm`.
    pub fn sdr(threshold_mm: f64) -> String {
        format!("sdr_{threshold_mm}mm")
    }
}

/// Metric values for one (dataset, task family, model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_id: String,
    pub model_id: String,
    pub task: TaskFamily,
    pub n_samples: usize,
    pub n_parse_failed: usize,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<BTreeMap<String, BTreeMap<String, f64>>>,
    /// Conventions behind the numbers that a reader should know about.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricReport {
    fn new(dataset_id: &str, model_id: &str, task: TaskFamily, items: &[Aligned<'_>]) -> Self {
        MetricReport {
            dataset_id: dataset_id.to_string(),
            model_id: model_id.to_string(),
            task,
            n_samples: items.len(),
            n_parse_failed: items.iter().filter(|i| i.output.is_failed()).count(),
            values: BTreeMap::new(),
            breakdown: None,
            notes: Vec::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Structural problems: counts out of order, non-finite values, rates
    /// outside `[0, 100]`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_parse_failed > self.n_samples {
            out.push(format!("n_parse_failed {} exceeds n_samples {}", self.n_parse_failed, self.n_samples));
        }
        let nested = self.breakdown.iter().flat_map(|b| b.values().flat_map(|m| m.iter()));
        for (k, v) in self.values.iter().chain(nested) {
            if !v.is_finite() {
                out.push(format!("{k} is not finite"));
            } else if is_rate(self.task, k) && !(0.0..=100.0).contains(v) {
                out.push(format!("{k} = {v} outside [0, 100]"));
            }
        }
        out
    }
}

fn is_rate(task: TaskFamily, key: &str) -> bool {
    match key {
        keys::OPEN | keys::CLOSE | keys::TOTAL | keys::OPEN_TOKEN_RECALL | keys::ACCURACY => true,
        keys::BLEU | keys::ROUGE_L | keys::METEOR => true,
        keys::MEAN_IOU => task == TaskFamily::Detect3D,
        k => k.starts_with("sdr_"),
    }
}

fn output_text(out: &ParsedOutput) -> &str {
    match out {
        ParsedOutput::Text(t) => t,
        _ => "",
    }
}

/// Computes the metric set for `family` over aligned items of one dataset.
pub fn score_family(
    dataset_id: &str,
    model_id: &str,
    family: TaskFamily,
    items: &[Aligned<'_>],
    default_spacing: f64,
) -> Result<MetricReport, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(bad) = items.iter().find(|i| i.sample.task.family() != family) {
        return Err(MetricError::InvalidArgument(format!(
            "sample {} has task {} outside family {family}",
            bad.sample.id, bad.sample.task
        )));
    }
    let mut report = MetricReport::new(dataset_id, model_id, family, items);
    match family {
        TaskFamily::Vqa => score_vqa(&mut report, items)?,
        TaskFamily::Classification => {
            report.values.insert(keys::ACCURACY.into(), accuracy(items, AccuracyMode::Choice)?);
        }
        TaskFamily::ReportGen => score_reports(&mut report, items)?,
        TaskFamily::Detect2D => {
            report.values.insert(keys::MEAN_IOU.into(), mean_iou(items, BoxDim::Two)?);
            report.notes.push("2D mean IoU is a fraction in [0, 1]".into());
        }
        TaskFamily::Detect3D => {
            report.values.insert(keys::MEAN_IOU.into(), mean_iou(items, BoxDim::Three)?);
            report.notes.push("3D score is mean IoU x 100".into());
        }
        TaskFamily::Landmark => score_landmarks(&mut report, items, default_spacing)?,
    }
    Ok(report)
}

fn score_vqa(report: &mut MetricReport, items: &[Aligned<'_>]) -> Result<(), MetricError> {
    let (open, closed): (Vec<Aligned>, Vec<Aligned>) =
        items.iter().cloned().partition(|i| i.sample.task == TaskKind::VqaOpen);
    let mut breakdown = BTreeMap::new();

    let mut correct = 0.0;
    if !open.is_empty() {
        let acc = accuracy(&open, AccuracyMode::Exact)?;
        correct += acc * open.len() as f64 / 100.0;
        report.values.insert(keys::OPEN.into(), acc);

        let mut recalls = Vec::with_capacity(open.len());
        let mut degenerate = 0;
        for it in &open {
            let gt = it.sample.answer_text().unwrap_or("");
            match token_recall(output_text(&it.output), gt) {
                Ok(r) => recalls.push(r),
                Err(_) => degenerate += 1,
            }
        }
        let mut sub = BTreeMap::from([("n".to_string(), open.len() as f64), (keys::ACCURACY.to_string(), acc)]);
        if let Some(mean) = stable_mean(&recalls) {
            report.values.insert(keys::OPEN_TOKEN_RECALL.into(), 100.0 * mean);
            sub.insert("token_recall".into(), 100.0 * mean);
        }
        if degenerate > 0 {
            report
                .notes
                .push(format!("{degenerate} open answers normalize to nothing and are excluded from token recall"));
        }
        breakdown.insert(keys::OPEN.to_string(), sub);
    }
    if !closed.is_empty() {
        let acc = accuracy(&closed, AccuracyMode::Choice)?;
        correct += acc * closed.len() as f64 / 100.0;
        report.values.insert(keys::CLOSE.into(), acc);
        breakdown.insert(
            keys::CLOSE.to_string(),
            BTreeMap::from([("n".to_string(), closed.len() as f64), (keys::ACCURACY.to_string(), acc)]),
        );
    }
    report.values.insert(keys::TOTAL.into(), 100.0 * correct.round() / items.len() as f64);
    report.breakdown = Some(breakdown);
    report.notes.push("total is sample-weighted over open and closed questions".into());
    Ok(())
}

fn score_reports(report: &mut MetricReport, items: &[Aligned<'_>]) -> Result<(), MetricError> {
    let (kept, dropped): (Vec<&Aligned>, Vec<&Aligned>) =
        items.iter().partition(|i| !answer_tokens(i.sample.answer_text().unwrap_or("")).is_empty());
    if !dropped.is_empty() {
        report.notes.push(format!("{} samples with empty reference text excluded", dropped.len()));
    }
    if kept.is_empty() {
        return Err(MetricError::DegenerateReference("all references are empty".into()));
    }
    let preds: Vec<&str> = kept.iter().map(|i| output_text(&i.output)).collect();
    let refs: Vec<&str> = kept.iter().map(|i| i.sample.answer_text().unwrap_or("")).collect();
    report.values.insert(keys::BLEU.into(), bleu(&preds, &refs, 4)?);
    report.values.insert(keys::ROUGE_L.into(), rouge_l(&preds, &refs)?);
    report.values.insert(keys::METEOR.into(), meteor(&preds, &refs)?);
    match cider_d(&preds, &refs) {
        Ok(v) => {
            report.values.insert(keys::CIDER.into(), v);
        }
        Err(MetricError::CorpusTooSmall(n)) => {
            report.notes.push(format!("CIDEr-D needs at least 2 pairs, got {n}"));
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

fn score_landmarks(report: &mut MetricReport, items: &[Aligned<'_>], default_spacing: f64) -> Result<(), MetricError> {
    let errors = landmark_errors(items, default_spacing)?;
    match mre(&errors) {
        Ok((m, excluded)) => {
            report.values.insert(keys::MRE.into(), m);
            report.values.insert(keys::MRE_EXCLUDED.into(), excluded as f64);
        }
        Err(MetricError::DegenerateInput(msg)) => {
            report.values.insert(keys::MRE_EXCLUDED.into(), errors.len() as f64);
            report.notes.push(msg);
        }
        Err(e) => return Err(e),
    }
    for (t, v) in SDR_THRESHOLDS_MM.iter().zip(sdr(&errors, &SDR_THRESHOLDS_MM)?) {
        report.values.insert(keys::sdr(*t), v);
    }
    Ok(())
}
