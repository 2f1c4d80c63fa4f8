use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::{Map, Value};

use crate::parse::normalize_answer;
use crate::record::{
    validate_sample, Box2D, Box3D, GroundTruth, NamedPoint, Point2D, Sample, Split, TaskKind, GRID_MAX,
};

use super::jsonl::read_jsonl;
use super::manifest::{BoxUnits, DatasetManifest, SourceFormat};
use super::DataError;

type SampleIter = Box<dyn Iterator<Item = Result<Sample, DataError>> + Send>;

/// Streaming ingest of one or more splits. Yields samples in file order,
/// train before valid before test.
pub struct Ingest {
    parts: std::vec::IntoIter<SampleIter>,
    current: Option<SampleIter>,
}

impl Iterator for Ingest {
    type Item = Result<Sample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(it) = &mut self.current {
                if let Some(item) = it.next() {
                    return Some(item);
                }
            }
            self.current = Some(self.parts.next()?);
        }
    }
}

/// Every split the manifest lists. Files are opened up front, so a missing
/// file fails here rather than midway through the stream.
pub fn ingest(m: &DatasetManifest) -> Result<Ingest, DataError> {
    let ctx = Arc::new(Context::new(m)?);
    let mut parts = Vec::new();
    for split in Split::ALL {
        if let Some(path) = m.split_path(split) {
            parts.push(open_split(&ctx, split, path)?);
        }
    }
    Ok(Ingest { parts: parts.into_iter(), current: None })
}

/// One split. A split the manifest does not list yields nothing.
pub fn ingest_split(m: &DatasetManifest, split: Split) -> Result<Ingest, DataError> {
    let ctx = Arc::new(Context::new(m)?);
    let parts = match m.split_path(split) {
        Some(path) => vec![open_split(&ctx, split, path)?],
        None => Vec::new(),
    };
    Ok(Ingest { parts: parts.into_iter(), current: None })
}

struct Context {
    m: DatasetManifest,
    dims: BTreeMap<String, [u32; 2]>,
}

impl Context {
    fn new(m: &DatasetManifest) -> Result<Self, DataError> {
        let dims = if m.format == SourceFormat::Box2DJsonl { m.load_image_dims()? } else { BTreeMap::new() };
        Ok(Context { m: m.clone(), dims })
    }
}

fn open_split(ctx: &Arc<Context>, split: Split, path: PathBuf) -> Result<SampleIter, DataError> {
    if ctx.m.format == SourceFormat::LandmarkCsv {
        return open_landmark_csv(ctx, split, path);
    }
    let ctx = Arc::clone(ctx);
    let reader = read_jsonl::<Map<String, Value>>(&path)?;
    Ok(Box::new(reader.map(move |item| {
        let (line, obj) = item?;
        let sample = match ctx.m.format {
            SourceFormat::QaJsonl => qa_record(&ctx, split, line, obj),
            SourceFormat::CaptionJsonl => caption_record(&ctx, split, line, obj),
            SourceFormat::Box2DJsonl => box2d_record(&ctx, split, line, obj),
            SourceFormat::Box3DJsonl => box3d_record(&ctx, split, line, obj),
            SourceFormat::UnifiedJsonl => unified_record(&ctx, split, obj),
            SourceFormat::LandmarkCsv => unreachable!("handled above"),
        }
        .map_err(|e| match e {
            RecordError::Msg(msg) => DataError::format(&path, line, msg),
            RecordError::Data(d) => d,
        })?;
        finish(sample, &path, line)
    })))
}

fn finish(sample: Sample, path: &Path, line: usize) -> Result<Sample, DataError> {
    let problems = validate_sample(&sample);
    if problems.is_empty() {
        Ok(sample)
    } else {
        Err(DataError::format(path, line, problems.join("; ")))
    }
}

enum RecordError {
    Msg(String),
    Data(DataError),
}

impl From<String> for RecordError {
    fn from(s: String) -> Self {
        RecordError::Msg(s)
    }
}

impl From<&str> for RecordError {
    fn from(s: &str) -> Self {
        RecordError::Msg(s.to_string())
    }
}

impl From<serde_json::Error> for RecordError {
    fn from(e: serde_json::Error) -> Self {
        RecordError::Msg(e.to_string())
    }
}

/// Fields shared by every JSONL adapter.
#[derive(Deserialize)]
struct Common {
    #[serde(default)]
    id: Option<Value>,
    #[serde(default)]
    image: Option<String>,
    #[serde(default)]
    images: Option<Vec<String>>,
}

const COMMON_KEYS: &[&str] = &["id", "image", "images"];

fn take_common(
    ctx: &Context,
    split: Split,
    line: usize,
    obj: &mut Map<String, Value>,
) -> Result<(String, Vec<String>), RecordError> {
    let mut part = Map::new();
    for k in COMMON_KEYS {
        if let Some(v) = obj.remove(*k) {
            part.insert((*k).to_string(), v);
        }
    }
    let c: Common = serde_json::from_value(Value::Object(part))?;
    let id = match c.id {
        None | Some(Value::Null) => format!("{}:{}:{}", ctx.m.dataset_id, split, line),
        Some(Value::String(s)) => s,
        Some(Value::Number(n)) => n.to_string(),
        Some(other) => return Err(format!("id must be a string or number, got {other}").into()),
    };
    let mut images = c.images.unwrap_or_default();
    if let Some(img) = c.image {
        images.insert(0, img);
    }
    Ok((id, images))
}

fn take<T: for<'de> Deserialize<'de>>(obj: &mut Map<String, Value>, key: &str) -> Result<Option<T>, RecordError> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| format!("field '{key}': {e}").into()),
    }
}

fn base(
    ctx: &Context,
    split: Split,
    id: String,
    task: TaskKind,
    images: Vec<String>,
    question: String,
    gt: GroundTruth,
) -> Sample {
    Sample {
        id,
        dataset_id: ctx.m.dataset_id.clone(),
        task,
        language: ctx.m.language,
        image_refs: images,
        question,
        options: None,
        ground_truth: gt,
        split,
        extra: Map::new(),
    }
}

fn qa_record(ctx: &Context, split: Split, line: usize, mut obj: Map<String, Value>) -> Result<Sample, RecordError> {
    let (id, images) = take_common(ctx, split, line, &mut obj)?;
    let question: Option<String> = take(&mut obj, "question")?;
    let question = question.or_else(|| ctx.m.question.clone()).unwrap_or_default();
    let answer: Value = obj.remove("answer").ok_or("missing field 'answer'")?;
    let answer_type: Option<String> = take(&mut obj, "answer_type")?;
    let record_options: Option<Vec<String>> = take(&mut obj, "options")?;
    let mut options = record_options.or_else(|| ctx.m.options.clone());

    let closed_hint = answer_type.as_deref().is_some_and(|t| t.eq_ignore_ascii_case("closed"));
    if options.is_none() && closed_hint && ctx.m.task != TaskKind::Classification {
        if let Value::String(a) = &answer {
            if matches!(normalize_answer(a).as_str(), "yes" | "no") {
                options = Some(vec!["yes".to_string(), "no".to_string()]);
            }
        }
    }

    let (task, gt) = match (ctx.m.task, options.as_ref()) {
        (TaskKind::Classification, Some(opts)) => {
            (TaskKind::Classification, GroundTruth::Choice(choice_index(&answer, opts)?))
        }
        (TaskKind::Classification, None) => return Err("classification record has no options".into()),
        (TaskKind::VqaOpen | TaskKind::VqaClosed, Some(opts)) => {
            (TaskKind::VqaClosed, GroundTruth::Choice(choice_index(&answer, opts)?))
        }
        (TaskKind::VqaOpen | TaskKind::VqaClosed, None) => {
            (TaskKind::VqaOpen, GroundTruth::Text(answer_string(&answer)?))
        }
        (other, _) => return Err(format!("qa_jsonl cannot produce {other} samples").into()),
    };
    let mut s = base(ctx, split, id, task, images, question, gt);
    s.options = options.filter(|_| task.requires_options());
    if let Some(t) = answer_type {
        obj.insert("answer_type".into(), Value::String(t));
    }
    s.extra = obj;
    Ok(s)
}

fn answer_string(v: &Value) -> Result<String, RecordError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(if *b { "yes" } else { "no" }.to_string()),
        other => Err(format!("answer must be text, got {other}").into()),
    }
}

/// An integer answer is an option index; text is matched exactly, then
/// after normalization.
fn choice_index(answer: &Value, options: &[String]) -> Result<usize, RecordError> {
    if let Some(i) = answer.as_u64() {
        let i = i as usize;
        return if i < options.len() {
            Ok(i)
        } else {
            Err(format!("answer index {i} out of range for {} options", options.len()).into())
        };
    }
    let text = answer_string(answer)?;
    if let Some(i) = options.iter().position(|o| *o == text) {
        return Ok(i);
    }
    let norm = normalize_answer(&text);
    let hits: Vec<usize> =
        options.iter().enumerate().filter(|(_, o)| normalize_answer(o) == norm).map(|(i, _)| i).collect();
    match hits.as_slice() {
        [i] => Ok(*i),
        [] => Err(format!("answer '{text}' is not among the options").into()),
        _ => Err(format!("answer '{text}' matches several options").into()),
    }
}

fn caption_record(
    ctx: &Context,
    split: Split,
    line: usize,
    mut obj: Map<String, Value>,
) -> Result<Sample, RecordError> {
    let (id, images) = take_common(ctx, split, line, &mut obj)?;
    let mut text = None;
    for key in ["caption", "report", "text"] {
        if let Some(t) = take::<String>(&mut obj, key)? {
            text = Some(t);
            break;
        }
    }
    let text = text.ok_or("missing field 'caption'")?;
    let question: Option<String> = take(&mut obj, "question")?;
    let question = question.or_else(|| ctx.m.question.clone()).unwrap_or_default();
    let mut s = base(ctx, split, id, TaskKind::ReportGen, images, question, GroundTruth::Text(text));
    s.extra = obj;
    Ok(s)
}

fn object_name(ctx: &Context, obj: &mut Map<String, Value>) -> Result<String, RecordError> {
    let mut name: Option<String> = take(obj, "object")?;
    if name.is_none() {
        name = take(obj, "question")?;
    }
    name.or_else(|| ctx.m.question.clone()).ok_or_else(|| "missing field 'object'".into())
}

/// Pixel coordinate to the grounding grid.
fn to_grid(v: f64, extent: u32) -> u32 {
    ((v / f64::from(extent)) * f64::from(GRID_MAX)).round().clamp(0.0, f64::from(GRID_MAX)) as u32
}

fn box2d_record(ctx: &Context, split: Split, line: usize, mut obj: Map<String, Value>) -> Result<Sample, RecordError> {
    let (id, images) = take_common(ctx, split, line, &mut obj)?;
    let name = object_name(ctx, &mut obj)?;
    let raw: [f64; 4] = take(&mut obj, "box")?.ok_or("missing field 'box'")?;
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err("box coordinates must be finite and non-negative".into());
    }
    let b = match ctx.m.box_units {
        BoxUnits::Grid => {
            if raw.iter().any(|v| v.fract() != 0.0) {
                return Err("grid box coordinates must be integers".into());
            }
            let [x1, y1, x2, y2] = raw.map(|v| v.min(f64::from(u32::MAX)) as u32);
            Box2D::new(x1, y1, x2, y2)
        }
        BoxUnits::Pixel => {
            let image = images.first().ok_or("pixel boxes need an image to look up dimensions")?;
            let [w, h] = *ctx.dims.get(image).ok_or_else(|| {
                RecordError::Data(DataError::MissingDimensions {
                    dataset_id: ctx.m.dataset_id.clone(),
                    image_ref: image.clone(),
                })
            })?;
            Box2D::new(to_grid(raw[0], w), to_grid(raw[1], h), to_grid(raw[2], w), to_grid(raw[3], h))
        }
    };
    let mut s = base(ctx, split, id, TaskKind::Detect2D, images, name, GroundTruth::Box2D(b));
    s.extra = obj;
    Ok(s)
}

fn box3d_record(ctx: &Context, split: Split, line: usize, mut obj: Map<String, Value>) -> Result<Sample, RecordError> {
    let (id, images) = take_common(ctx, split, line, &mut obj)?;
    let name = object_name(ctx, &mut obj)?;
    let [x1, y1, z1, x2, y2, z2]: [u32; 6] = take(&mut obj, "box")?.ok_or("missing field 'box'")?;
    let gt = GroundTruth::Box3D(Box3D::new(x1, y1, z1, x2, y2, z2));
    let mut s = base(ctx, split, id, TaskKind::Detect3D, images, name, gt);
    s.extra = obj;
    Ok(s)
}

fn unified_record(ctx: &Context, split: Split, obj: Map<String, Value>) -> Result<Sample, RecordError> {
    let s: Sample = serde_json::from_value(Value::Object(obj))?;
    if s.split != split {
        return Err(format!("record declares split {} but is listed under {split}", s.split).into());
    }
    if s.dataset_id != ctx.m.dataset_id {
        return Err(format!("record declares dataset {} but the manifest is {}", s.dataset_id, ctx.m.dataset_id).into());
    }
    Ok(s)
}

#[derive(Deserialize)]
struct LandmarkRow {
    #[serde(default)]
    id: Option<String>,
    image: String,
    landmark: String,
    x: f64,
    y: f64,
}

fn open_landmark_csv(ctx: &Arc<Context>, split: Split, path: PathBuf) -> Result<SampleIter, DataError> {
    let ctx = Arc::clone(ctx);
    let mut rdr =
        csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path).map_err(|e| DataError::csv(&path, e))?;
    let headers = rdr.headers().map_err(|e| DataError::csv(&path, e))?.clone();
    Ok(Box::new(rdr.into_records().map(move |rec| {
        let rec = rec.map_err(|e| DataError::csv(&path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: LandmarkRow =
            rec.deserialize(Some(&headers)).map_err(|e| DataError::format(&path, line, e.to_string()))?;
        let mut point = Point2D::new(row.x, row.y);
        if let Some(sp) = ctx.m.spacing_mm_per_px {
            point = point.with_spacing(sp);
        }
        let id = row.id.filter(|s| !s.is_empty()).unwrap_or_else(|| format!("{}:{}:{}", ctx.m.dataset_id, split, line));
        let gt = GroundTruth::Points(vec![NamedPoint { name: row.landmark.clone(), point }]);
        let s = base(&ctx, split, id, TaskKind::Landmark, vec![row.image], row.landmark, gt);
        finish(s, &path, line)
    })))
}
