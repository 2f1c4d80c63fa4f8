use std::path::Path;
use std::process::{Command, Output};

use medvl_client::mock::{MockReply, MockServer};
use medvl_core::{GroundTruth, Language, Prediction, Sample, Split, TaskKind};

fn medvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvl")).args(args).env("MEDVL_LOG", "warn").output().expect("run medvl")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn closed(i: usize, split: Split) -> Sample {
    Sample {
        id: format!("q{i}"),
        dataset_id: "vqa-rad".into(),
        task: TaskKind::VqaClosed,
        language: Language::En,
        image_refs: vec![format!("img{i}.png")],
        question: format!("is finding {i} present?"),
        options: Some(vec!["yes".into(), "no".into()]),
        ground_truth: GroundTruth::Choice(i % 2),
        split,
        extra: Default::default(),
    }
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let text: String = items.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect();
    std::fs::write(path, text).unwrap();
}

/// Answers "yes" except for sample 3, which gets a 400.
fn flaky_server() -> MockServer {
    MockServer::start(|req| {
        if req.image_urls().iter().any(|u| u == "img3.png") {
            MockReply::Status(400)
        } else {
            MockReply::text("yes")
        }
    })
}

fn manifest_dir(dir: &Path, splits: &[Split]) -> std::path::PathBuf {
    let m = dir.join("manifests");
    let mut toml =
        String::from("dataset_id = \"vqa-rad\"\ntask = \"vqa_closed\"\nformat = \"unified_jsonl\"\n\n[splits]\n");
    for split in splits {
        let samples: Vec<Sample> = (0..6).map(|i| closed(i, *split)).collect();
        write_lines(&m.join(format!("{split}.jsonl")), &samples);
        toml.push_str(&format!("{split} = \"{split}.jsonl\"\n"));
    }
    std::fs::write(m.join("vqa-rad.toml"), toml).unwrap();
    m
}

fn run_config(dir: &Path, url: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!("manifests = \"manifests\"\nout_dir = \"run\"\n\n[endpoint]\nbase_url = \"{url}\"\nmodel_id = \"m\"\nbackoff_base_ms = 1\n"),
    )
    .unwrap();
    path
}

#[test]
fn score_reports_missing_ids_and_exits_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.jsonl");
    write_lines(&gt, &[closed(0, Split::Test), closed(1, Split::Test)]);
    let preds = dir.path().join("preds.jsonl");
    let pred = Prediction {
        sample_id: "q0".into(),
        raw_text: "yes".into(),
        parsed: None,
        model_id: "m".into(),
        latency_ms: 0.0,
        error: None,
    };
    write_lines(&preds, &[pred]);
    let out =
        medvl(&["score", "--predictions", p(&preds), "--ground-truth", p(&gt), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing [\"q1\"]"), "{}", stderr(&out));
}

#[test]
fn malformed_metric_file_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.json"), "{\"dataset_id\": 3}").unwrap();
    let out = medvl(&["report", "--metrics", p(dir.path()), "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("malformed metric file"), "{}", stderr(&out));
}

#[test]
fn infer_with_failed_samples_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("s.jsonl");
    write_lines(&samples, &(0..5).map(|i| closed(i, Split::Test)).collect::<Vec<_>>());
    let server = flaky_server();
    let out_path = dir.path().join("preds.jsonl");
    let out = medvl(&[
        "infer",
        "--samples",
        p(&samples),
        "--endpoint",
        &server.base_url(),
        "--model",
        "m",
        "--out",
        p(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let preds: Vec<Prediction> =
        std::fs::read_to_string(&out_path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(preds.len(), 5);
    assert!(preds[3].error.is_some());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("preds.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failures"], 1);
}

#[test]
fn infer_without_endpoint_is_rejected() {
    let out = medvl(&["infer", "--samples", "nope.jsonl", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_partial_run_stays_partial_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    manifest_dir(dir.path(), &[Split::Train, Split::Test]);
    let server = flaky_server();
    let cfg = run_config(dir.path(), &server.base_url());
    let first = medvl(&["pipeline", "--config", p(&cfg)]);
    assert_eq!(first.status.code(), Some(1), "{}", stderr(&first));
    assert!(dir.path().join("run/report/report.md").exists());
    server.reset_calls();
    let again = medvl(&["pipeline", "--config", p(&cfg)]);
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(server.calls(), 0);
}

#[test]
fn failed_stage_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    manifest_dir(dir.path(), &[Split::Train]);
    let server = MockServer::start(|_| MockReply::text("yes"));
    let cfg = run_config(dir.path(), &server.base_url());
    let out = medvl(&["pipeline", "--config", p(&cfg)]);
    // ingest and build-sft succeed; render finds no test split.
    assert_eq!(out.status.code(), Some(12), "{}", stderr(&out));
    assert!(stderr(&out).contains("stage render failed"), "{}", stderr(&out));
    assert!(dir.path().join("run/.stages/build-sft.done").exists());
    assert!(!dir.path().join("run/.stages/render.done").exists());
}
