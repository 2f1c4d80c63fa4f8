//! Markdown and CSV tables over metric files.
//!
//! Rendering is a pure function of the metric reports: datasets and models
//! are sorted, numbers use two decimals and missing cells read `-`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{Context, Result};
use medvl_core::metrics::{keys, MetricReport, SDR_THRESHOLDS_MM};
use medvl_core::TaskFamily;
use tracing::info;

use crate::commands::sanitize;
use crate::{CliError, Outcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub title: String,
    /// File name of the CSV form.
    pub csv_name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(title: impl Into<String>, csv_name: impl Into<String>, header: Vec<String>) -> Self {
        Table { title: title.into(), csv_name: csv_name.into(), header, rows: Vec::new() }
    }

    pub fn to_markdown(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                std::iter::once(&self.header).chain(&self.rows).map(|r| r[c].chars().count()).max().unwrap_or(0).max(3)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> =
                cells.iter().zip(&widths).map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = format!("## {}\n\n", self.title);
        out.push_str(&line(&self.header));
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&format!("| {} |\n", rule.join(" | ")));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub markdown: String,
    pub tables: Vec<Table>,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "-".to_string(),
    }
}

type Key<'a> = (TaskFamily, &'a str, &'a str);

struct Index<'a> {
    by_key: BTreeMap<Key<'a>, &'a MetricReport>,
}

impl<'a> Index<'a> {
    fn datasets(&self, family: TaskFamily) -> Vec<&'a str> {
        let set: BTreeSet<&str> = self.by_key.keys().filter(|k| k.0 == family).map(|k| k.1).collect();
        set.into_iter().collect()
    }

    fn models(&self, family: TaskFamily) -> Vec<&'a str> {
        let set: BTreeSet<&str> = self.by_key.keys().filter(|k| k.0 == family).map(|k| k.2).collect();
        set.into_iter().collect()
    }

    fn value(&self, family: TaskFamily, ds: &str, model: &str, key: &str) -> Option<f64> {
        self.by_key.get(&(family, ds, model)).and_then(|r| r.get(key))
    }

    /// Model rows, one `(dataset, metric)` column per entry of `cols`.
    fn model_rows(&self, family: TaskFamily, mut table: Table, cols: &[(&str, &str)]) -> Table {
        for model in self.models(family) {
            let mut row = vec![model.to_string()];
            row.extend(cols.iter().map(|(ds, key)| cell(self.value(family, ds, model, key))));
            table.rows.push(row);
        }
        table
    }

    fn per_dataset(&self, family: TaskFamily, title: &str, csv: &str, metrics: &[(&str, &str)]) -> Option<Table> {
        let datasets = self.datasets(family);
        if datasets.is_empty() {
            return None;
        }
        let mut header = vec!["Model".to_string()];
        let mut cols = Vec::new();
        for ds in &datasets {
            for (label, key) in metrics {
                header.push(if label.is_empty() { ds.to_string() } else { format!("{ds} {label}") });
                cols.push((*ds, *key));
            }
        }
        Some(self.model_rows(family, Table::new(title, csv, header), &cols))
    }

    fn detection(&self, family: TaskFamily, title: &str, csv: &str) -> Option<Table> {
        let datasets = self.datasets(family);
        if datasets.is_empty() {
            return None;
        }
        let models = self.models(family);
        let mut header = vec!["Dataset".to_string()];
        header.extend(models.iter().map(|m| m.to_string()));
        let mut t = Table::new(title, csv, header);
        for ds in datasets {
            let mut row = vec![ds.to_string()];
            row.extend(models.iter().map(|m| cell(self.value(family, ds, m, keys::MEAN_IOU))));
            t.rows.push(row);
        }
        Some(t)
    }
}

pub fn render(reports: &[MetricReport]) -> Rendered {
    let mut markdown = String::from("# Evaluation report\n\n");
    if reports.is_empty() {
        markdown.push_str("No results.\n");
        return Rendered { markdown, tables: Vec::new() };
    }
    let idx =
        Index { by_key: reports.iter().map(|r| ((r.task, r.dataset_id.as_str(), r.model_id.as_str()), r)).collect() };

    let mut tables = Vec::new();
    tables.extend(idx.per_dataset(
        TaskFamily::Vqa,
        "Medical VQA (accuracy)",
        "vqa.csv",
        &[("open", keys::OPEN), ("close", keys::CLOSE), ("total", keys::TOTAL)],
    ));
    let recall_datasets: Vec<&str> = idx
        .datasets(TaskFamily::Vqa)
        .into_iter()
        .filter(|ds| reports.iter().any(|r| r.dataset_id == *ds && r.get(keys::OPEN_TOKEN_RECALL).is_some()))
        .collect();
    if !recall_datasets.is_empty() {
        let mut header = vec!["Model".to_string()];
        header.extend(recall_datasets.iter().map(|ds| format!("{ds} open")));
        let cols: Vec<(&str, &str)> = recall_datasets.iter().map(|ds| (*ds, keys::OPEN_TOKEN_RECALL)).collect();
        tables.push(idx.model_rows(
            TaskFamily::Vqa,
            Table::new("Open VQA token recall", "vqa_token_recall.csv", header),
            &cols,
        ));
    }
    tables.extend(idx.per_dataset(
        TaskFamily::Classification,
        "Classification (accuracy)",
        "classification.csv",
        &[("", keys::ACCURACY)],
    ));
    tables.extend(idx.per_dataset(
        TaskFamily::ReportGen,
        "Report generation",
        "report_gen.csv",
        &[("ROUGE-L", keys::ROUGE_L), ("METEOR", keys::METEOR), ("CIDEr", keys::CIDER)],
    ));
    tables.extend(idx.per_dataset(
        TaskFamily::ReportGen,
        "Report generation (BLEU)",
        "report_gen_bleu.csv",
        &[("BLEU", keys::BLEU), ("ROUGE-L", keys::ROUGE_L), ("METEOR", keys::METEOR)],
    ));
    tables.extend(idx.detection(TaskFamily::Detect2D, "2D detection (mean IoU)", "detect2d.csv"));
    tables.extend(idx.detection(TaskFamily::Detect3D, "3D detection (mean IoU x 100)", "detect3d.csv"));

    let sdr_keys: Vec<String> = SDR_THRESHOLDS_MM.iter().map(|t| keys::sdr(*t)).collect();
    for ds in idx.datasets(TaskFamily::Landmark) {
        let mut header = vec!["Model".to_string(), "MRE".to_string()];
        header.extend(SDR_THRESHOLDS_MM.iter().map(|t| format!("SDR {t}mm")));
        let mut cols = vec![(ds, keys::MRE)];
        cols.extend(sdr_keys.iter().map(|k| (ds, k.as_str())));
        let table = Table::new(format!("Landmark detection: {ds}"), format!("landmark_{}.csv", sanitize(ds)), header);
        tables.push(idx.model_rows(TaskFamily::Landmark, table, &cols));
    }

    let mut failures = Table::new(
        "Parse failures",
        "parse_failures.csv",
        ["Dataset", "Task", "Model", "Samples", "Parse failures", "Rate (%)"].map(String::from).to_vec(),
    );
    let mut ordered: Vec<&MetricReport> = idx.by_key.values().copied().collect();
    ordered.sort_by(|a, b| (&a.dataset_id, a.task, &a.model_id).cmp(&(&b.dataset_id, b.task, &b.model_id)));
    for r in &ordered {
        let rate = 100.0 * r.n_parse_failed as f64 / r.n_samples.max(1) as f64;
        failures.rows.push(vec![
            r.dataset_id.clone(),
            r.task.to_string(),
            r.model_id.clone(),
            r.n_samples.to_string(),
            r.n_parse_failed.to_string(),
            cell(Some(rate)),
        ]);
    }
    tables.push(failures);

    for t in &tables {
        markdown.push_str(&t.to_markdown());
        markdown.push('\n');
    }

    let mut notes = BTreeSet::new();
    if !idx.datasets(TaskFamily::ReportGen).is_empty() {
        notes.insert("CIDEr is CIDEr-D on its standard scale (x10); other text metrics are x100.".to_string());
    }
    notes.insert("Missing results are shown as -.".to_string());
    for r in &ordered {
        for n in &r.notes {
            notes.insert(format!("{} {} ({}): {n}", r.dataset_id, r.task, r.model_id));
        }
    }
    markdown.push_str("## Notes\n\n");
    for n in notes {
        markdown.push_str(&format!("- {n}\n"));
    }
    Rendered { markdown, tables }
}

/// Reads every `*.json` metric file in `dir`, sorted by name.
pub fn load_reports(dir: &Path) -> Result<Vec<MetricReport>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading metrics directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let schema = |message: String| CliError::Schema { path: p.display().to_string(), message };
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let r: MetricReport = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
        let problems = r.violations();
        if !problems.is_empty() {
            return Err(schema(problems.join("; ")).into());
        }
        if !seen.insert((r.task, r.dataset_id.clone(), r.model_id.clone())) {
            return Err(schema(format!("duplicate result for {} {} {}", r.dataset_id, r.task, r.model_id)).into());
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_report(reports: &[MetricReport], out: &Path) -> Result<Rendered> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let rendered = render(reports);
    std::fs::write(out.join("report.md"), &rendered.markdown)?;
    for t in &rendered.tables {
        std::fs::write(out.join(&t.csv_name), t.to_csv()?)?;
    }
    info!(tables = rendered.tables.len(), path = %out.display(), "report written");
    Ok(rendered)
}

pub fn cmd_report(metrics: &Path, out: &Path) -> Result<Outcome> {
    let reports = load_reports(metrics)?;
    write_report(&reports, out)?;
    Ok(Outcome::Success)
}
