//! End-to-end acceptance checks. Runs as a plain binary so that every
//! criterion prints one pass/fail line, also when all of them pass.
//!
//! `cargo test -p medvl-cli --test acceptance -- <filter>` runs the criteria
//! whose name contains `<filter>`.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use medvl_client::mock::{MockReply, MockServer};
use medvl_core::dataengine::{check_splits, SplitCounts};
use medvl_core::metrics::{iou2d, iou3d, keys, mre, sdr, MetricReport, SDR_THRESHOLDS_MM};
use medvl_core::parse::{parse_box2d, parse_box3d, parse_point};
use medvl_core::templates::{render, render_label};
use medvl_core::{
    Box2D, Box3D, GroundTruth, Language, NamedPoint, Point2D, Prediction, Sample, Split, TaskFamily, TaskKind,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "template fidelity", limit: Some(Duration::from_secs(1)), run: template_fidelity },
    Criterion { id: 2, name: "grammar round trip", limit: Some(Duration::from_secs(10)), run: grammar_round_trip },
    Criterion { id: 3, name: "metric oracle equivalence", limit: Some(Duration::from_secs(5)), run: metric_oracle },
    Criterion { id: 4, name: "analytic metric cases", limit: None, run: analytic_metrics },
    Criterion { id: 5, name: "split bookkeeping", limit: None, run: split_bookkeeping },
    Criterion { id: 6, name: "echo pipeline identity", limit: Some(Duration::from_secs(30)), run: echo_pipeline },
    Criterion { id: 7, name: "determinism", limit: None, run: determinism },
    Criterion { id: 8, name: "cache idempotence", limit: None, run: cache_idempotence },
    Criterion { id: 9, name: "robustness to unparseable outputs", limit: None, run: robustness },
    Criterion { id: 10, name: "table fidelity", limit: None, run: table_fidelity },
];

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => {
                failed += 1;
                ("FAIL", e.clone())
            }
        };
        println!("criterion {:>2} [{tag}] {} ({:.2}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn medvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvl")).args(args).env("MEDVL_LOG", "warn").output().expect("run medvl")
}

fn expect_exit(out: &Output, code: i32, what: &str) -> Result<(), String> {
    ensure!(
        out.status.code() == Some(code),
        "{what}: exit {:?}, wanted {code}; stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).unwrap());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_metrics(dir: &Path) -> Vec<MetricReport> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths.iter().map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()).collect()
}

#[allow(clippy::too_many_arguments)]
fn sample(
    id: String,
    ds: &str,
    task: TaskKind,
    images: Vec<String>,
    question: &str,
    options: Option<&[&str]>,
    gt: GroundTruth,
    split: Split,
) -> Sample {
    Sample {
        id,
        dataset_id: ds.into(),
        task,
        language: Language::En,
        image_refs: images,
        question: question.into(),
        options: options.map(|o| o.iter().map(|s| s.to_string()).collect()),
        ground_truth: gt,
        split,
        extra: Default::default(),
    }
}

const WORDS: &[&str] = &[
    "heart",
    "lungs",
    "clear",
    "normal",
    "size",
    "no",
    "focal",
    "consolidation",
    "effusion",
    "pneumothorax",
    "mild",
    "opacity",
    "stable",
    "mediastinum",
    "osseous",
    "abnormality",
    "acute",
    "left",
    "right",
    "base",
];

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn random_box2d(rng: &mut ChaCha8Rng) -> Box2D {
    let x1 = rng.random_range(0..900);
    let y1 = rng.random_range(0..900);
    Box2D::new(x1, y1, x1 + rng.random_range(1..=100), y1 + rng.random_range(1..=100))
}

fn random_box3d(rng: &mut ChaCha8Rng) -> Box3D {
    let a: [u32; 3] = [rng.random_range(0..400), rng.random_range(0..400), rng.random_range(0..200)];
    Box3D::new(
        a[0],
        a[1],
        a[2],
        a[0] + rng.random_range(1..=80),
        a[1] + rng.random_range(1..=80),
        a[2] + rng.random_range(1..=40),
    )
}

/// Mixed-task corpus: `(dataset, task of manifest, samples)` with 200 test
/// samples overall and a few train samples per dataset.
fn mixed_corpus(seed: u64) -> Vec<(&'static str, TaskKind, Vec<Sample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let classes: &[&str] = &["adipose", "background", "debris", "lymphocytes"];
    for (ds, task, n_test) in [
        ("vqa-rad", TaskKind::VqaOpen, 40),
        ("pathmnist", TaskKind::Classification, 30),
        ("iu-xray", TaskKind::ReportGen, 30),
        ("rsna", TaskKind::Detect2D, 30),
        ("m3d-seg", TaskKind::Detect3D, 30),
        ("isbi2015", TaskKind::Landmark, 40),
    ] {
        let mut samples = Vec::new();
        for (split, n) in [(Split::Train, 5), (Split::Test, n_test)] {
            for i in 0..n {
                let id = format!("{ds}-{split}-{i}");
                let img = vec![format!("{ds}/{split}/{i}.png")];
                let s = match task {
                    TaskKind::VqaOpen if i % 2 == 1 => sample(
                        id,
                        ds,
                        TaskKind::VqaClosed,
                        img,
                        &format!("is there {}?", words(&mut rng, 1, 2)),
                        Some(&["yes", "no"]),
                        GroundTruth::Choice(rng.random_range(0..2)),
                        split,
                    ),
                    TaskKind::VqaOpen => sample(
                        id,
                        ds,
                        task,
                        img,
                        &format!("what is seen in the {}?", words(&mut rng, 1, 2)),
                        None,
                        GroundTruth::Text(words(&mut rng, 1, 3)),
                        split,
                    ),
                    TaskKind::Classification => sample(
                        id,
                        ds,
                        task,
                        img,
                        "which tissue type is shown?",
                        Some(classes),
                        GroundTruth::Choice(rng.random_range(0..classes.len())),
                        split,
                    ),
                    TaskKind::ReportGen => sample(
                        id,
                        ds,
                        task,
                        vec![format!("{ds}/{split}/{i}-pa.png"), format!("{ds}/{split}/{i}-lat.png")],
                        "",
                        None,
                        GroundTruth::Text(words(&mut rng, 6, 14)),
                        split,
                    ),
                    TaskKind::Detect2D => {
                        sample(id, ds, task, img, "pneumonia", None, GroundTruth::Box2D(random_box2d(&mut rng)), split)
                    }
                    TaskKind::Detect3D => {
                        sample(id, ds, task, img, "liver", None, GroundTruth::Box3D(random_box3d(&mut rng)), split)
                    }
                    TaskKind::Landmark => {
                        let point = Point2D::new(
                            f64::from(rng.random_range(0..19_350u32)) / 10.0,
                            f64::from(rng.random_range(0..24_000u32)) / 10.0,
                        )
                        .with_spacing(0.1);
                        let name = ["sella", "nasion", "orbitale", "porion"][i % 4];
                        let gt = GroundTruth::Points(vec![NamedPoint { name: name.into(), point }]);
                        sample(id, ds, task, img, name, None, gt, split)
                    }
                    _ => unreachable!(),
                };
                samples.push(s);
            }
        }
        out.push((ds, task, samples));
    }
    out
}

/// Unified-format manifests plus split files for `corpus` under `dir`.
fn write_unified(dir: &Path, corpus: &[(&str, TaskKind, Vec<Sample>)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (ds, task, samples) in corpus {
        let mut splits = String::new();
        for split in [Split::Train, Split::Test] {
            let part: Vec<&Sample> = samples.iter().filter(|s| s.split == split).collect();
            write_lines(&dir.join(ds).join(format!("{split}.jsonl")), &part);
            splits.push_str(&format!("{split} = \"{ds}/{split}.jsonl\"\n"));
        }
        let manifest = format!(
            "dataset_id = \"{ds}\"\ntask = \"{}\"\nformat = \"unified_jsonl\"\n\n[splits]\n{splits}",
            task.as_str()
        );
        std::fs::write(dir.join(format!("{ds}.toml")), manifest).unwrap();
    }
}

/// Key the echo mock uses to find a request's sample.
fn image_key(urls: &[String]) -> String {
    urls.join("|")
}

/// Mock endpoint answering every sample with its rendered ground-truth label.
fn echo_server(samples: impl IntoIterator<Item = Sample>) -> MockServer {
    let labels: HashMap<String, String> =
        samples.into_iter().map(|s| (image_key(&s.image_refs), render_label(&s.ground_truth, s.options()))).collect();
    let labels = Arc::new(labels);
    MockServer::start(move |req| match labels.get(&image_key(&req.image_urls())) {
        Some(label) => MockReply::text(label.clone()),
        None => MockReply::Status(400),
    })
}

// ---------------------------------------------------------------- criteria

#[derive(Deserialize)]
struct TemplateCase {
    name: String,
    task: TaskKind,
    images: Vec<String>,
    question: String,
    #[serde(default)]
    options: Option<Vec<String>>,
    ground_truth: GroundTruth,
    expected: String,
}

fn template_fidelity() -> Check {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/templates.json");
    let cases: Vec<TemplateCase> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let mut kinds = std::collections::BTreeSet::new();
    for c in &cases {
        let s = Sample {
            id: c.name.clone(),
            dataset_id: "golden".into(),
            task: c.task,
            language: Language::En,
            image_refs: c.images.clone(),
            question: c.question.clone(),
            options: c.options.clone(),
            ground_truth: c.ground_truth.clone(),
            split: Split::Test,
            extra: Default::default(),
        };
        let r = render(&s).map_err(|e| format!("{}: {e}", c.name))?;
        ensure!(r.user_text() == c.expected, "{}: rendered {:?}, golden {:?}", c.name, r.user_text(), c.expected);
        ensure!(r.image_slots == c.images.len(), "{}: image slots {}", c.name, r.image_slots);
        kinds.insert(c.task);
    }
    ensure!(kinds.len() == 7, "golden set covers {} task kinds", kinds.len());
    Ok(format!("{} golden templates byte-identical", cases.len()))
}

fn grammar_round_trip() -> Check {
    const PER_KIND: usize = 4_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for _ in 0..PER_KIND {
        let x1 = rng.random_range(0..=1000);
        let y1 = rng.random_range(0..=1000);
        let b = Box2D::new(x1, y1, rng.random_range(x1..=1000), rng.random_range(y1..=1000));
        let text = render_label(&GroundTruth::Box2D(b), &[]);
        if parse_box2d(&text) != Ok(b) {
            failures.push(text);
        }

        let lo: [u32; 3] = std::array::from_fn(|_| rng.random_range(0..100_000));
        let b = Box3D::new(
            lo[0],
            lo[1],
            lo[2],
            rng.random_range(lo[0]..=100_000),
            rng.random_range(lo[1]..=100_000),
            rng.random_range(lo[2]..=100_000),
        );
        let text = render_label(&GroundTruth::Box3D(b), &[]);
        if parse_box3d(&text) != Ok(b) {
            failures.push(text);
        }

        let (x, y) = if rng.random_bool(0.5) {
            (f64::from(rng.random_range(0..4096u32)), f64::from(rng.random_range(0..4096u32)))
        } else {
            (rng.random_range(0.0..4096.0), rng.random_range(0.0..4096.0))
        };
        let pt = Point2D::new(x, y);
        let text = render_label(&GroundTruth::Points(vec![NamedPoint { name: "p".into(), point: pt }]), &[]);
        if parse_point(&text) != Ok(pt) {
            failures.push(text);
        }
    }
    ensure!(failures.is_empty(), "{} failures, first: {}", failures.len(), failures[0]);
    Ok(format!("{} labels round-tripped", 3 * PER_KIND))
}

#[derive(Deserialize)]
struct OraclePair {
    pred: String,
    #[serde(rename = "ref")]
    reference: String,
}

#[derive(Deserialize)]
struct OracleScores {
    bleu: f64,
    rouge_l: f64,
    meteor: f64,
    cider_d: f64,
}

#[derive(Deserialize)]
struct Oracle {
    pairs: Vec<OraclePair>,
    first5: OracleScores,
    first10: OracleScores,
    all50: OracleScores,
}

fn metric_oracle() -> Check {
    use medvl_core::metrics::{bleu, cider_d, meteor, rouge_l};
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/metric_oracle.json");
    let o: Oracle = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    ensure!(o.pairs.len() == 50, "oracle corpus has {} pairs", o.pairs.len());
    let mut worst: f64 = 0.0;
    for (n, want) in [(5, &o.first5), (10, &o.first10), (50, &o.all50)] {
        let preds: Vec<&str> = o.pairs[..n].iter().map(|p| p.pred.as_str()).collect();
        let refs: Vec<&str> = o.pairs[..n].iter().map(|p| p.reference.as_str()).collect();
        let got = [
            ("bleu", bleu(&preds, &refs, 4).unwrap(), want.bleu, 1e-4),
            ("rouge_l", rouge_l(&preds, &refs).unwrap(), want.rouge_l, 1e-4),
            ("cider_d", cider_d(&preds, &refs).unwrap(), want.cider_d, 1e-4),
            ("meteor", meteor(&preds, &refs).unwrap(), want.meteor, 1e-3),
        ];
        for (name, g, w, tol) in got {
            ensure!((g - w).abs() <= tol, "{name} on first {n}: got {g}, oracle {w}");
            worst = worst.max((g - w).abs());
        }
    }
    Ok(format!("4 metrics x 3 subsets within tolerance, max abs diff {worst:.2e}"))
}

fn analytic_metrics() -> Check {
    let iou = iou2d(&Box2D::new(0, 0, 10, 10), &Box2D::new(5, 5, 15, 15));
    ensure!((iou - 1.0 / 7.0).abs() <= 1e-12, "iou2d = {iou}");
    let cube = iou3d(&Box3D::new(0, 0, 0, 10, 10, 10), &Box3D::new(0, 0, 0, 10, 10, 10));
    ensure!(cube == 1.0, "identical 3D boxes iou = {cube}");

    let errors = [0.5, 2.2, 3.1];
    let (m, excluded) = mre(&errors).unwrap();
    ensure!((m - 1.9333).abs() <= 1e-4 && excluded == 0, "mre = {m}, excluded {excluded}");
    let rates = sdr(&errors, &SDR_THRESHOLDS_MM).unwrap();
    for (got, want) in rates.iter().zip([33.33, 66.67, 66.67, 100.0]) {
        ensure!((got - want).abs() <= 0.01, "sdr {rates:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let thresholds: Vec<f64> = (1..=40).map(|t| f64::from(t) * 0.25).collect();
    for v in 0..1000 {
        let n = rng.random_range(1..50);
        let errs: Vec<f64> =
            (0..n).map(|_| if rng.random_bool(0.05) { f64::INFINITY } else { rng.random_range(0.0..12.0) }).collect();
        let rates = sdr(&errs, &thresholds).unwrap();
        ensure!(rates.windows(2).all(|w| w[0] <= w[1]), "vector {v}: sdr not monotone {rates:?}");
    }
    Ok(format!("iou2d = {iou:.15}, mre = {m:.4}, sdr = {rates:.2?}, 1000 vectors monotone"))
}

fn split_bookkeeping() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    std::fs::create_dir_all(&raw).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // VQA-RAD style: question/answer records, closed questions flagged.
    for (split, n) in [("train", 1797), ("test", 451)] {
        let recs: Vec<Value> = (0..n)
            .map(|i| {
                if rng.random_bool(0.55) {
                    json!({"image": format!("synpic{i}.jpg"), "question": "is there an effusion?",
                           "answer": if rng.random_bool(0.5) { "yes" } else { "no" }, "answer_type": "CLOSED"})
                } else {
                    json!({"image": format!("synpic{i}.jpg"), "question": "where is the lesion?",
                           "answer": "left lower lobe", "answer_type": "OPEN"})
                }
            })
            .collect();
        write_lines(&raw.join(format!("vqa-rad/{split}.jsonl")), &recs);
    }
    std::fs::write(
        raw.join("vqa-rad.toml"),
        "dataset_id = \"vqa-rad\"\ntask = \"vqa_open\"\nformat = \"qa_jsonl\"\n\n[splits]\ntrain = \"vqa-rad/train.jsonl\"\ntest = \"vqa-rad/test.jsonl\"\n\n[expected]\ntrain = 1797\nvalid = 0\ntest = 451\n",
    )
    .unwrap();
    // IU-Xray style: frontal and lateral images with a report.
    for (split, n) in [("train", 2069), ("valid", 590), ("test", 296)] {
        let recs: Vec<Value> = (0..n)
            .map(|i| {
                json!({"id": format!("CXR{split}{i}"), "images": [format!("CXR{i}_1.png"), format!("CXR{i}_2.png")],
                       "report": words(&mut rng, 5, 20)})
            })
            .collect();
        write_lines(&raw.join(format!("iu-xray/{split}.jsonl")), &recs);
    }
    std::fs::write(
        raw.join("iu-xray.toml"),
        "dataset_id = \"iu-xray\"\ntask = \"report_gen\"\nformat = \"caption_jsonl\"\n\n[splits]\ntrain = \"iu-xray/train.jsonl\"\nvalid = \"iu-xray/valid.jsonl\"\ntest = \"iu-xray/test.jsonl\"\n\n[expected]\ntrain = 2069\nvalid = 590\ntest = 296\n",
    )
    .unwrap();

    let out = dir.path().join("ingested");
    expect_exit(&medvl(&["ingest", "--manifest", p(&raw), "--out", p(&out)]), 0, "ingest")?;

    #[derive(Deserialize)]
    struct Entry {
        actual: SplitCounts,
        mismatches: Vec<String>,
    }
    let report: BTreeMap<String, Entry> =
        serde_json::from_str(&std::fs::read_to_string(out.join("splits.json")).unwrap()).unwrap();
    let mut lines = Vec::new();
    for (ds, want) in [("vqa-rad", SplitCounts::new(1797, 0, 451)), ("iu-xray", SplitCounts::new(2069, 590, 296))] {
        let e = report.get(ds).ok_or(format!("{ds} missing from splits.json"))?;
        let mism = check_splits(&e.actual, &want);
        ensure!(mism.is_empty() && e.mismatches.is_empty(), "{ds}: {mism:?} {:?}", e.mismatches);
        for split in Split::ALL {
            let file = out.join(ds).join(format!("{split}.jsonl"));
            let lines_on_disk = if file.exists() { read_lines::<Sample>(&file).len() as u64 } else { 0 };
            ensure!(lines_on_disk == want.get(split), "{ds} {split}: {lines_on_disk} records on disk");
        }
        lines.push(format!("{ds} {}/{}/{}", e.actual.train, e.actual.valid, e.actual.test));
    }
    Ok(format!("{}, zero mismatches", lines.join("; ")))
}

fn echo_pipeline() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let corpus = mixed_corpus(6);
    write_unified(&dir.path().join("manifests"), &corpus);
    let test: Vec<Sample> =
        corpus.iter().flat_map(|(_, _, s)| s.iter().filter(|s| s.split == Split::Test).cloned()).collect();
    ensure!(test.len() == 200, "corpus has {} test samples", test.len());
    let server = echo_server(test.iter().cloned());

    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 11\nmanifests = \"manifests\"\nout_dir = \"run\"\n\n[endpoint]\nbase_url = \"{}\"\nmodel_id = \"echo\"\nparallelism = 8\n",
            server.base_url()
        ),
    )
    .unwrap();
    expect_exit(&medvl(&["pipeline", "--config", p(&config)]), 0, "pipeline")?;
    ensure!(server.calls() == 200, "{} endpoint calls", server.calls());

    let run = dir.path().join("run");
    let reports = read_metrics(&run.join("metrics"));
    ensure!(reports.len() == 6, "{} metric files", reports.len());
    let mut seen = Vec::new();
    for r in &reports {
        ensure!(r.n_parse_failed == 0, "{} {}: {} parse failures", r.dataset_id, r.task, r.n_parse_failed);
        let want: Vec<(String, f64)> = match r.task {
            TaskFamily::Vqa => {
                vec![(keys::OPEN.into(), 100.0), (keys::CLOSE.into(), 100.0), (keys::TOTAL.into(), 100.0)]
            }
            TaskFamily::Classification => vec![(keys::ACCURACY.into(), 100.0)],
            TaskFamily::ReportGen => vec![(keys::BLEU.into(), 100.0)],
            TaskFamily::Detect2D => vec![(keys::MEAN_IOU.into(), 1.0)],
            TaskFamily::Detect3D => vec![(keys::MEAN_IOU.into(), 100.0)],
            TaskFamily::Landmark => {
                let mut v = vec![(keys::MRE.into(), 0.0)];
                v.extend(SDR_THRESHOLDS_MM.iter().map(|t| (keys::sdr(*t), 100.0)));
                v
            }
        };
        for (k, w) in want {
            ensure!(r.get(&k) == Some(w), "{} {}: {k} = {:?}, wanted exactly {w}", r.dataset_id, r.task, r.get(&k));
        }
        seen.push(r.task.to_string());
    }
    let report_md = std::fs::read_to_string(run.join("report/report.md")).unwrap();
    let class_csv = std::fs::read_to_string(run.join("report/classification.csv")).unwrap();
    ensure!(class_csv.lines().nth(1) == Some("echo,100.00"), "classification table: {class_csv}");

    // Rerun: every stage is skipped and nothing is sent.
    server.reset_calls();
    expect_exit(&medvl(&["pipeline", "--config", p(&config)]), 0, "rerun")?;
    ensure!(server.calls() == 0, "rerun made {} calls", server.calls());
    ensure!(std::fs::read_to_string(run.join("report/report.md")).unwrap() == report_md, "rerun changed the report");

    // A config without an endpoint fails before any work.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "manifests = \"manifests\"\nout_dir = \"bad-run\"\n").unwrap();
    expect_exit(&medvl(&["pipeline", "--config", p(&bad)]), 2, "config without endpoint")?;
    ensure!(!dir.path().join("bad-run").exists(), "invalid config still created output");

    Ok(format!("200 samples, perfect scores for {}; rerun skipped all stages", seen.join(", ")))
}

fn sorted_lines(path: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect();
    v.sort();
    v
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let manifests = dir.path().join("manifests");
    let mut corpus = mixed_corpus(7);
    // More train samples so that orders can differ visibly.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (ds, _, samples) in &mut corpus {
        let extra: Vec<Sample> = samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .map(|s| {
                let mut t = s.clone();
                t.split = Split::Train;
                t.id = format!("{ds}-extra-{}-{}", s.id, rng.random_range(0..1000));
                t
            })
            .collect();
        samples.extend(extra);
    }
    write_unified(&manifests, &corpus);

    let sft = |seed: &str, name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        expect_exit(
            &medvl(&["build-sft", "--manifest", p(&manifests), "--seed", seed, "--out", p(&out)]),
            0,
            "build-sft",
        )?;
        Ok(std::fs::read(&out).unwrap())
    };
    let a = sft("1", "sft-a.jsonl")?;
    let b = sft("1", "sft-b.jsonl")?;
    let c = sft("2", "sft-c.jsonl")?;
    ensure!(a == b, "build-sft with equal seeds differs");
    ensure!(a != c, "build-sft with different seeds gave the same order");
    ensure!(
        sorted_lines(&dir.path().join("sft-a.jsonl")) == sorted_lines(&dir.path().join("sft-c.jsonl")),
        "build-sft record multisets differ across seeds"
    );
    let n_sft = a.iter().filter(|&&b| b == b'\n').count();

    let pool: Vec<Value> = (0..60)
        .map(|i| {
            json!({"image_ref": format!("cxr/{i}.png"), "caption": words(&mut rng, 4, 10),
                   "dataset_id": if i % 3 == 0 { "mimic" } else { "roco" }})
        })
        .collect();
    let pool_path = dir.path().join("pool.jsonl");
    write_lines(&pool_path, &pool);
    let align = |seed: &str, name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.path().join(name);
        let args =
            ["build-align", "--pool", p(&pool_path), "--seed", seed, "--synthetic-fraction", "0.5", "--out", p(&out)];
        expect_exit(&medvl(&args), 0, "build-align")?;
        Ok((std::fs::read(out.join("paired.jsonl")).unwrap(), std::fs::read(out.join("jobs.jsonl")).unwrap()))
    };
    let (pa, ja) = align("1", "align-a")?;
    let (pb, jb) = align("1", "align-b")?;
    let (pc, _) = align("2", "align-c")?;
    ensure!(pa == pb && ja == jb, "build-align with equal seeds differs");
    ensure!(pa != pc, "build-align with different seeds gave the same order");
    ensure!(
        sorted_lines(&dir.path().join("align-a/paired.jsonl"))
            == sorted_lines(&dir.path().join("align-c/paired.jsonl")),
        "paired multisets differ across seeds"
    );
    let n_jobs = ja.iter().filter(|&&b| b == b'\n').count();
    Ok(format!("build-sft {n_sft} records and build-align 60 paired + {n_jobs} jobs byte-identical per seed"))
}

fn cache_idempotence() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<Sample> =
        mixed_corpus(8).into_iter().flat_map(|(_, _, s)| s).filter(|s| s.split == Split::Test).collect();
    let samples_path = dir.path().join("samples.jsonl");
    write_lines(&samples_path, &samples);
    let server = echo_server(samples.iter().cloned());
    let cache = dir.path().join("cache");
    let url = server.base_url();
    let infer = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let args = [
            "infer",
            "--samples",
            p(&samples_path),
            "--endpoint",
            &url,
            "--model",
            "echo",
            "--cache-dir",
            p(&cache),
            "--parallelism",
            "6",
            "--out",
            p(&out),
        ];
        expect_exit(&medvl(&args), 0, "infer")?;
        Ok(std::fs::read(&out).unwrap())
    };
    let first = infer("first.jsonl")?;
    let cold_calls = server.calls();
    ensure!(cold_calls == samples.len(), "cold run made {cold_calls} calls for {} samples", samples.len());
    server.reset_calls();
    let second = infer("second.jsonl")?;
    ensure!(server.calls() == 0, "warm run made {} calls", server.calls());
    ensure!(first == second, "prediction files differ between cold and warm runs");
    Ok(format!("{} samples: cold {cold_calls} calls, warm 0 calls, identical {} bytes", samples.len(), first.len()))
}

fn robustness() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 100;
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    let mut parseable: BTreeMap<TaskFamily, Vec<f64>> = BTreeMap::new();
    for (ds, task) in [("rsna", TaskKind::Detect2D), ("m3d-seg", TaskKind::Detect3D)] {
        let mut unparseable: Vec<bool> = (0..n).map(|i| i < 30).collect();
        unparseable.shuffle(&mut rng);
        for (i, free_text) in unparseable.into_iter().enumerate() {
            let id = format!("{ds}-{i}");
            let (gt, raw) = if task == TaskKind::Detect2D {
                let g = random_box2d(&mut rng);
                let pr = Box2D::from_corners(
                    (g.x1 + rng.random_range(0..20), g.y1 + rng.random_range(0..20)),
                    (g.x2 + rng.random_range(0..20), g.y2 + rng.random_range(0..20)),
                );
                if !free_text {
                    parseable.entry(TaskFamily::Detect2D).or_default().push(iou2d(&pr, &g));
                }
                (GroundTruth::Box2D(g), render_label(&GroundTruth::Box2D(pr), &[]))
            } else {
                let g = random_box3d(&mut rng);
                let pr = Box3D::from_corners(
                    (g.x1 + rng.random_range(0..10), g.y1 + rng.random_range(0..10), g.z1 + rng.random_range(0..5)),
                    (g.x2 + rng.random_range(0..10), g.y2 + rng.random_range(0..10), g.z2 + rng.random_range(0..5)),
                );
                if !free_text {
                    parseable.entry(TaskFamily::Detect3D).or_default().push(iou3d(&pr, &g));
                }
                (GroundTruth::Box3D(g), render_label(&GroundTruth::Box3D(pr), &[]))
            };
            let raw = if free_text { "The lesion is in the lower part of the right lung.".to_string() } else { raw };
            let q = if task == TaskKind::Detect2D { "pneumonia" } else { "liver" };
            samples.push(sample(id.clone(), ds, task, vec![format!("{id}.png")], q, None, gt, Split::Test));
            preds.push(Prediction {
                sample_id: id,
                raw_text: raw,
                parsed: None,
                model_id: "m".into(),
                latency_ms: 1.0,
                error: None,
            });
        }
    }
    let gt_path = dir.path().join("gt.jsonl");
    let pred_path = dir.path().join("preds.jsonl");
    write_lines(&gt_path, &samples);
    write_lines(&pred_path, &preds);
    let metrics = dir.path().join("metrics");
    let out = medvl(&["score", "--predictions", p(&pred_path), "--ground-truth", p(&gt_path), "--out", p(&metrics)]);
    expect_exit(&out, 0, "score")?;

    let mut detail = Vec::new();
    for r in read_metrics(&metrics) {
        let ious = &parseable[&r.task];
        ensure!(ious.len() == 70, "{} parseable", ious.len());
        let scale = if r.task == TaskFamily::Detect3D { 100.0 } else { 1.0 };
        let want = 0.7 * scale * ious.iter().sum::<f64>() / ious.len() as f64;
        let got = r.get(keys::MEAN_IOU).ok_or("mean_iou missing")?;
        ensure!(
            (got - want).abs() <= 1e-12 * scale,
            "{}: mean IoU {got}, wanted 0.7 x parseable mean = {want}",
            r.task
        );
        ensure!(
            r.n_parse_failed == 30 && r.n_samples == 100,
            "{}: {} of {} failed",
            r.task,
            r.n_parse_failed,
            r.n_samples
        );
        detail.push(format!("{} {got:.6} = 0.7 x {:.6}", r.task, want / 0.7));
    }
    ensure!(detail.len() == 2, "expected 2 metric files, found {}", detail.len());
    Ok(format!("{}; n_parse_failed 30/100", detail.join(", ")))
}

fn as_refs(v: &[(String, f64)]) -> Vec<(&str, f64)> {
    v.iter().map(|(k, x)| (k.as_str(), *x)).collect()
}

fn metric(ds: &str, model: &str, task: TaskFamily, n: usize, failed: usize, values: &[(&str, f64)]) -> Value {
    let values: BTreeMap<String, f64> = values.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    json!({"dataset_id": ds, "model_id": model, "task": task, "n_samples": n, "n_parse_failed": failed, "values": values})
}

fn table_fidelity() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("metrics");
    std::fs::create_dir_all(&metrics).unwrap();
    let vqa = TaskFamily::Vqa;
    let rg = TaskFamily::ReportGen;
    let lm = TaskFamily::Landmark;
    let sdr = |v: [f64; 4]| -> Vec<(String, f64)> { SDR_THRESHOLDS_MM.iter().map(|t| keys::sdr(*t)).zip(v).collect() };
    let lm_umit: Vec<(String, f64)> = [(keys::MRE.to_string(), 1.97), (keys::MRE_EXCLUDED.into(), 0.0)]
        .into_iter()
        .chain(sdr([63.79, 76.95, 85.32, 93.21]))
        .collect();
    let lm_base: Vec<(String, f64)> = [(keys::MRE.to_string(), 10.15), (keys::MRE_EXCLUDED.into(), 3.0)]
        .into_iter()
        .chain(sdr([12.6, 21.91, 33.1, 39.84]))
        .collect();
    let files = [
        (
            "vqa-rad.vqa.umit",
            metric(
                "vqa-rad",
                "umit",
                vqa,
                451,
                2,
                &[("open", 61.45), ("close", 84.19), ("total", 75.17), ("open_token_recall", 70.39)],
            ),
        ),
        (
            "vqa-rad.vqa.baseline",
            metric("vqa-rad", "baseline", vqa, 451, 40, &[("open", 11.2), ("close", 25.27), ("total", 19.73)]),
        ),
        (
            "slake.vqa.umit",
            metric("slake", "umit", vqa, 1061, 0, &[("open", 84.96), ("close", 91.35), ("total", 87.46)]),
        ),
        ("path-vqa.vqa.umit", metric("path-vqa", "umit", vqa, 6761, 0, &[("open", 40.02), ("total", 40.02)])),
        (
            "iu-xray.report_gen.umit",
            metric(
                "iu-xray",
                "umit",
                rg,
                296,
                0,
                &[("bleu", 12.1), ("rouge_l", 30.3), ("meteor", 16.0), ("cider", 0.343)],
            ),
        ),
        (
            "iu-xray.report_gen.baseline",
            metric(
                "iu-xray",
                "baseline",
                rg,
                296,
                0,
                &[("bleu", 0.8), ("rouge_l", 6.9), ("meteor", 1.6), ("cider", 0.053)],
            ),
        ),
        (
            "peir-gross.report_gen.umit",
            metric("peir-gross", "umit", rg, 1470, 0, &[("bleu", 20.4), ("rouge_l", 42.6), ("meteor", 22.9)]),
        ),
        ("isbi2015.landmark.umit", metric("isbi2015", "umit", lm, 4750, 0, &as_refs(&lm_umit))),
        ("isbi2015.landmark.baseline", metric("isbi2015", "baseline", lm, 4750, 3, &as_refs(&lm_base))),
    ];
    for (name, v) in &files {
        std::fs::write(metrics.join(format!("{name}.json")), serde_json::to_string_pretty(v).unwrap()).unwrap();
    }
    let out = dir.path().join("report");
    expect_exit(&medvl(&["report", "--metrics", p(&metrics), "--out", p(&out)]), 0, "report")?;
    let got = std::fs::read_to_string(out.join("report.md")).unwrap();
    let golden_path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/report.md");
    if std::env::var_os("MEDVL_BLESS").is_some() {
        std::fs::write(golden_path, &got).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path).unwrap();
    ensure!(got == golden, "report.md differs from golden:\n{got}");

    let header = |csv: &str| std::fs::read_to_string(out.join(csv)).unwrap().lines().next().unwrap_or("").to_string();
    ensure!(
        header("vqa.csv") == "Model,path-vqa open,path-vqa close,path-vqa total,slake open,slake close,slake total,vqa-rad open,vqa-rad close,vqa-rad total",
        "vqa.csv header {}",
        header("vqa.csv")
    );
    ensure!(
        header("report_gen.csv") == "Model,iu-xray ROUGE-L,iu-xray METEOR,iu-xray CIDEr,peir-gross ROUGE-L,peir-gross METEOR,peir-gross CIDEr",
        "report_gen.csv header {}",
        header("report_gen.csv")
    );
    ensure!(
        header("landmark_isbi2015.csv") == "Model,MRE,SDR 2mm,SDR 2.5mm,SDR 3mm,SDR 4mm",
        "landmark header {}",
        header("landmark_isbi2015.csv")
    );

    // Re-rendering is byte-identical; an empty directory gets the banner.
    let again = dir.path().join("again");
    expect_exit(&medvl(&["report", "--metrics", p(&metrics), "--out", p(&again)]), 0, "re-render")?;
    ensure!(std::fs::read_to_string(again.join("report.md")).unwrap() == got, "re-rendered report differs");
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let empty_out = dir.path().join("empty-report");
    expect_exit(&medvl(&["report", "--metrics", p(&empty), "--out", p(&empty_out)]), 0, "empty report")?;
    ensure!(
        std::fs::read_to_string(empty_out.join("report.md")).unwrap().contains("No results."),
        "empty report lacks banner"
    );
    Ok("report.md matches golden; open/close/total, ROUGE-L/METEOR/CIDEr, MRE/SDR column orders verified".into())
}
