//! Unified record schema shared by every stage of the toolkit.
//!
//! A [`Sample`] is one task instance drawn from any of the source datasets.
//! Records are stored as JSON Lines with snake_case field names; fields this
//! crate does not know about are kept in [`Sample::extra`] so that a
//! decode/encode cycle never loses data.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Upper bound of the normalized 2D grounding grid.
pub const GRID_MAX: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "vqa_open")]
    VqaOpen,
    #[serde(rename = "vqa_closed")]
    VqaClosed,
    #[serde(rename = "classification")]
    Classification,
    #[serde(rename = "report_gen")]
    ReportGen,
    #[serde(rename = "detect2d")]
    Detect2D,
    #[serde(rename = "detect3d")]
    Detect3D,
    #[serde(rename = "landmark")]
    Landmark,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::VqaOpen,
        TaskKind::VqaClosed,
        TaskKind::Classification,
        TaskKind::ReportGen,
        TaskKind::Detect2D,
        TaskKind::Detect3D,
        TaskKind::Landmark,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::VqaOpen => "vqa_open",
            TaskKind::VqaClosed => "vqa_closed",
            TaskKind::Classification => "classification",
            TaskKind::ReportGen => "report_gen",
            TaskKind::Detect2D => "detect2d",
            TaskKind::Detect3D => "detect3d",
            TaskKind::Landmark => "landmark",
        }
    }

    /// Closed tasks answer by selecting one of the listed options.
    pub fn requires_options(self) -> bool {
        matches!(self, TaskKind::VqaClosed | TaskKind::Classification)
    }

    pub fn forbids_options(self) -> bool {
        matches!(self, TaskKind::VqaOpen | TaskKind::ReportGen)
    }

    pub fn family(self) -> TaskFamily {
        match self {
            TaskKind::VqaOpen | TaskKind::VqaClosed => TaskFamily::Vqa,
            TaskKind::Classification => TaskFamily::Classification,
            TaskKind::ReportGen => TaskFamily::ReportGen,
            TaskKind::Detect2D => TaskFamily::Detect2D,
            TaskKind::Detect3D => TaskFamily::Detect3D,
            TaskKind::Landmark => TaskFamily::Landmark,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown task kind '{s}'"))
    }
}

/// Scoring groups. Open and closed VQA are scored together so that a single
/// report carries the open/close/total triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Vqa,
    Classification,
    ReportGen,
    #[serde(rename = "detect2d")]
    Detect2D,
    #[serde(rename = "detect3d")]
    Detect3D,
    Landmark,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::Vqa,
        TaskFamily::Classification,
        TaskFamily::ReportGen,
        TaskFamily::Detect2D,
        TaskFamily::Detect3D,
        TaskFamily::Landmark,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Vqa => "vqa",
            TaskFamily::Classification => "classification",
            TaskFamily::ReportGen => "report_gen",
            TaskFamily::Detect2D => "detect2d",
            TaskFamily::Detect3D => "detect3d",
            TaskFamily::Landmark => "landmark",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskFamily::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown task family '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    #[default]
    En,
    Zh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown split '{s}'"))
    }
}

/// Axis-aligned box on the 0..=1000 grounding grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl Box2D {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Box2D { x1, y1, x2, y2 }
    }

    /// Builds a box from two arbitrary corners, ordering each axis.
    pub fn from_corners((ax, ay): (u32, u32), (bx, by): (u32, u32)) -> Self {
        Box2D::new(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.x1 > self.x2 {
            out.push("x1 > x2".to_string());
        }
        if self.y1 > self.y2 {
            out.push("y1 > y2".to_string());
        }
        for (name, v) in [("x1", self.x1), ("y1", self.y1), ("x2", self.x2), ("y2", self.y2)] {
            if v > GRID_MAX {
                out.push(format!("{name} exceeds {GRID_MAX}"));
            }
        }
        out
    }

    /// Half-open area: a zero-width box has zero area.
    pub fn area(&self) -> u64 {
        u64::from(self.x2.saturating_sub(self.x1)) * u64::from(self.y2.saturating_sub(self.y1))
    }
}

/// Axis-aligned box in raw voxel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box3D {
    pub x1: u32,
    pub y1: u32,
    pub z1: u32,
    pub x2: u32,
    pub y2: u32,
    pub z2: u32,
}

impl Box3D {
    pub fn new(x1: u32, y1: u32, z1: u32, x2: u32, y2: u32, z2: u32) -> Self {
        Box3D { x1, y1, z1, x2, y2, z2 }
    }

    pub fn from_corners(a: (u32, u32, u32), b: (u32, u32, u32)) -> Self {
        Box3D::new(a.0.min(b.0), a.1.min(b.1), a.2.min(b.2), a.0.max(b.0), a.1.max(b.1), a.2.max(b.2))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.x1 > self.x2 {
            out.push("x1 > x2".to_string());
        }
        if self.y1 > self.y2 {
            out.push("y1 > y2".to_string());
        }
        if self.z1 > self.z2 {
            out.push("z1 > z2".to_string());
        }
        out
    }

    pub fn volume(&self) -> u128 {
        u128::from(self.x2.saturating_sub(self.x1))
            * u128::from(self.y2.saturating_sub(self.y1))
            * u128::from(self.z2.saturating_sub(self.z1))
    }
}

/// Landmark position in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm_per_px: Option<f64>,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Point2D { x, y, spacing_mm_per_px: None }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing_mm_per_px = Some(spacing);
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.x.is_finite() && self.x >= 0.0) {
            out.push("point x must be finite and non-negative".to_string());
        }
        if !(self.y.is_finite() && self.y >= 0.0) {
            out.push("point y must be finite and non-negative".to_string());
        }
        if let Some(s) = self.spacing_mm_per_px {
            if !(s.is_finite() && s > 0.0) {
                out.push("spacing_mm_per_px must be positive".to_string());
            }
        }
        out
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPoint {
    pub name: String,
    #[serde(flatten)]
    pub point: Point2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Text(String),
    Choice(usize),
    #[serde(rename = "box2d")]
    Box2D(Box2D),
    #[serde(rename = "box3d")]
    Box3D(Box3D),
    Points(Vec<NamedPoint>),
}

impl GroundTruth {
    pub fn variant_name(&self) -> &'static str {
        match self {
            GroundTruth::Text(_) => "text",
            GroundTruth::Choice(_) => "choice",
            GroundTruth::Box2D(_) => "box2d",
            GroundTruth::Box3D(_) => "box3d",
            GroundTruth::Points(_) => "points",
        }
    }

    fn matches_task(&self, task: TaskKind) -> bool {
        matches!(
            (self, task),
            (GroundTruth::Text(_), TaskKind::VqaOpen | TaskKind::ReportGen)
                | (GroundTruth::Choice(_), TaskKind::VqaClosed | TaskKind::Classification)
                | (GroundTruth::Box2D(_), TaskKind::Detect2D)
                | (GroundTruth::Box3D(_), TaskKind::Detect3D)
                | (GroundTruth::Points(_), TaskKind::Landmark)
        )
    }
}

/// Model output after grammar parsing. Mirrors [`GroundTruth`] plus a failure arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedOutput {
    Text(String),
    Choice(usize),
    #[serde(rename = "box2d")]
    Box2D(Box2D),
    #[serde(rename = "box3d")]
    Box3D(Box3D),
    Points(Vec<NamedPoint>),
    ParseFailed(String),
}

impl ParsedOutput {
    pub fn is_failed(&self) -> bool {
        matches!(self, ParsedOutput::ParseFailed(_))
    }

    /// Whether this output has the variant a sample of `task` demands.
    /// `ParseFailed` is acceptable for every task.
    pub fn fits_task(&self, task: TaskKind) -> bool {
        match self {
            ParsedOutput::ParseFailed(_) => true,
            ParsedOutput::Text(_) => matches!(task, TaskKind::VqaOpen | TaskKind::ReportGen),
            ParsedOutput::Choice(_) => matches!(task, TaskKind::VqaClosed | TaskKind::Classification),
            ParsedOutput::Box2D(_) => task == TaskKind::Detect2D,
            ParsedOutput::Box3D(_) => task == TaskKind::Detect3D,
            ParsedOutput::Points(_) => task == TaskKind::Landmark,
        }
    }
}

impl From<GroundTruth> for ParsedOutput {
    fn from(gt: GroundTruth) -> Self {
        match gt {
            GroundTruth::Text(t) => ParsedOutput::Text(t),
            GroundTruth::Choice(i) => ParsedOutput::Choice(i),
            GroundTruth::Box2D(b) => ParsedOutput::Box2D(b),
            GroundTruth::Box3D(b) => ParsedOutput::Box3D(b),
            GroundTruth::Points(p) => ParsedOutput::Points(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub dataset_id: String,
    pub task: TaskKind,
    #[serde(default)]
    pub language: Language,
    #[serde(default)]
    pub image_refs: Vec<String>,
    #[serde(default)]
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub ground_truth: GroundTruth,
    pub split: Split,
    /// Fields not part of the schema, carried through unchanged.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Sample {
    pub fn options(&self) -> &[String] {
        self.options.as_deref().unwrap_or(&[])
    }

    /// Text form of the ground truth for text-scored tasks.
    pub fn answer_text(&self) -> Option<&str> {
        match &self.ground_truth {
            GroundTruth::Text(t) => Some(t),
            GroundTruth::Choice(i) => self.options().get(*i).map(String::as_str),
            _ => None,
        }
    }
}

/// Every invariant violation of `s`, in a stable order. Empty means valid.
pub fn validate_sample(s: &Sample) -> Vec<String> {
    let mut out = Vec::new();
    if s.id.trim().is_empty() {
        out.push("id is empty".to_string());
    }
    if s.dataset_id.trim().is_empty() {
        out.push("dataset_id is empty".to_string());
    }
    if s.image_refs.is_empty() && s.task != TaskKind::Detect2D {
        out.push("at least one image_ref is required".to_string());
    }
    if s.question.trim().is_empty() && s.task != TaskKind::ReportGen {
        out.push("question is empty".to_string());
    }

    let n_options = s.options.as_ref().map(Vec::len);
    if s.task.requires_options() && n_options.unwrap_or(0) == 0 {
        out.push("closed task requires options".to_string());
    }
    if s.task.forbids_options() && s.options.is_some() {
        out.push("open task forbids options".to_string());
    }

    if !s.ground_truth.matches_task(s.task) {
        out.push(format!("ground truth variant {} does not match task {}", s.ground_truth.variant_name(), s.task));
    }

    match &s.ground_truth {
        GroundTruth::Text(_) => {}
        GroundTruth::Choice(i) => {
            let n = n_options.unwrap_or(0);
            if *i >= n {
                out.push(format!("choice index {i} out of range for {n} options"));
            }
        }
        GroundTruth::Box2D(b) => out.extend(b.violations()),
        GroundTruth::Box3D(b) => out.extend(b.violations()),
        GroundTruth::Points(points) => {
            if s.task == TaskKind::Landmark && points.len() != 1 {
                out.push(format!("landmark sample requires exactly one point, found {}", points.len()));
            }
            let mut seen = HashSet::new();
            for p in points {
                if !seen.insert(p.name.as_str()) {
                    out.push(format!("duplicate landmark name '{}'", p.name));
                }
                out.extend(p.point.violations());
            }
        }
    }
    out
}

/// Raw model text for one sample plus its parsed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedOutput>,
    pub model_id: String,
    pub latency_ms: f64,
    /// Transport failure, when the request never produced model text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
