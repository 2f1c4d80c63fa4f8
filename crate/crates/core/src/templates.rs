//! Instruction templates for the five task families and the matching label
//! formats.
//!
//! Every instruction starts with one `<image>` placeholder per image
//! reference followed by the task body. Labels for geometric tasks use the
//! grammars that [`crate::parse`] reads back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{validate_sample, GroundTruth, Sample, TaskKind};

pub const IMAGE_PLACEHOLDER: &str = "<image>";

/// Separator placed between options in the closed-question template.
pub const OPTION_SEPARATOR: &str = "\n";

/// Byte sequences for the grounding special tokens.
///
/// `aliases` lets a parser accept additional spellings (e.g. a checkpoint
/// whose tokenizer decodes the markers differently). Rendering always uses
/// the primary spelling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkerTokens {
    pub box_start: String,
    pub box_end: String,
    pub object_ref_start: String,
    pub object_ref_end: String,
    pub box_start_aliases: Vec<String>,
    pub box_end_aliases: Vec<String>,
}

impl Default for MarkerTokens {
    fn default() -> Self {
        MarkerTokens {
            box_start: "<|box_start|>".into(),
            box_end: "<|box_end|>".into(),
            object_ref_start: "<|object_ref_start|>".into(),
            object_ref_end: "<|object_ref_end|>".into(),
            box_start_aliases: Vec::new(),
            box_end_aliases: Vec::new(),
        }
    }
}

impl MarkerTokens {
    /// Every accepted (start, end) spelling, primary first.
    pub fn box_pairs(&self) -> Vec<(&str, &str)> {
        let starts: Vec<&str> =
            std::iter::once(self.box_start.as_str()).chain(self.box_start_aliases.iter().map(String::as_str)).collect();
        let ends: Vec<&str> =
            std::iter::once(self.box_end.as_str()).chain(self.box_end_aliases.iter().map(String::as_str)).collect();
        let mut pairs = Vec::new();
        for s in &starts {
            for e in &ends {
                pairs.push((*s, *e));
            }
        }
        pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedFormat {
    FreeText,
    OptionChoice,
    #[serde(rename = "box_token_2d")]
    BoxToken2D,
    #[serde(rename = "bracket_box_3d")]
    BracketBox3D,
    BracketPoint,
}

impl ExpectedFormat {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::VqaOpen | TaskKind::ReportGen => ExpectedFormat::FreeText,
            TaskKind::VqaClosed | TaskKind::Classification => ExpectedFormat::OptionChoice,
            TaskKind::Detect2D => ExpectedFormat::BoxToken2D,
            TaskKind::Detect3D => ExpectedFormat::BracketBox3D,
            TaskKind::Landmark => ExpectedFormat::BracketPoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedInstruction {
    pub sample_id: String,
    pub messages: Vec<Message>,
    pub image_slots: usize,
    pub expected_format: ExpectedFormat,
}

impl RenderedInstruction {
    /// Text of the (last) user message.
    pub fn user_text(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("")
    }

    /// All messages flattened into one prompt string.
    pub fn prompt(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("sample {id} is invalid: {}", violations.join("; "))]
    InvalidSample { id: String, violations: Vec<String> },
    #[error("unsupported task {0}")]
    UnsupportedTask(TaskKind),
}

/// Options controlling rendering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RenderOptions {
    pub markers: MarkerTokens,
    /// Optional system message prepended to every conversation.
    pub system_prompt: Option<String>,
}

pub fn render(s: &Sample) -> Result<RenderedInstruction, RenderError> {
    render_with(s, &RenderOptions::default())
}

pub fn render_with(s: &Sample, opts: &RenderOptions) -> Result<RenderedInstruction, RenderError> {
    let violations = validate_sample(s);
    if !violations.is_empty() {
        return Err(RenderError::InvalidSample { id: s.id.clone(), violations });
    }

    let mut text = String::new();
    for _ in &s.image_refs {
        text.push_str(IMAGE_PLACEHOLDER);
        text.push(' ');
    }
    let q = s.question.as_str();
    let m = &opts.markers;
    let body = match s.task {
        TaskKind::VqaOpen => format!("given the image, please provide a brief answer to {q}"),
        TaskKind::VqaClosed | TaskKind::Classification => {
            format!("given the image, choose one option from the {} to answer: {q}", s.options().join(OPTION_SEPARATOR))
        }
        TaskKind::ReportGen => {
            "given the image, please review the image and create a report that assesses any abnormalities.".to_string()
        }
        TaskKind::Detect2D => format!("Find {}{q}{} in this image.", m.object_ref_start, m.object_ref_end),
        TaskKind::Detect3D => format!("Find the {q}, please respond with a 3D bounding box."),
        TaskKind::Landmark => {
            format!("given the image, find the {q}, the response is given in the format of [x,y].")
        }
    };
    text.push_str(&body);

    let mut messages = Vec::with_capacity(2);
    if let Some(sys) = &opts.system_prompt {
        messages.push(Message { role: Role::System, content: sys.clone() });
    }
    messages.push(Message { role: Role::User, content: text });

    Ok(RenderedInstruction {
        sample_id: s.id.clone(),
        messages,
        image_slots: s.image_refs.len(),
        expected_format: ExpectedFormat::for_task(s.task),
    })
}

/// Target text for a ground truth. `options` resolves `Choice` indices.
pub fn render_label(gt: &GroundTruth, options: &[String]) -> String {
    render_label_with(gt, options, &MarkerTokens::default())
}

pub fn render_label_with(gt: &GroundTruth, options: &[String], markers: &MarkerTokens) -> String {
    match gt {
        GroundTruth::Text(t) => t.clone(),
        GroundTruth::Choice(i) => options.get(*i).cloned().unwrap_or_default(),
        GroundTruth::Box2D(b) => {
            format!("{}({},{}),({},{}){}", markers.box_start, b.x1, b.y1, b.x2, b.y2, markers.box_end)
        }
        GroundTruth::Box3D(b) => {
            format!("[({},{},{}),({},{},{})]", b.x1, b.y1, b.z1, b.x2, b.y2, b.z2)
        }
        GroundTruth::Points(points) => {
            points.iter().map(|p| format!("[{},{}]", p.point.x, p.point.y)).collect::<Vec<_>>().join(",")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{Box2D, Box3D, Language, NamedPoint, Point2D, Split};

    fn sample(task: TaskKind, question: &str, options: Option<&[&str]>, gt: GroundTruth) -> Sample {
        Sample {
            id: "t".into(),
            dataset_id: "d".into(),
            task,
            language: Language::En,
            image_refs: vec!["a.png".into()],
            question: question.into(),
            options: options.map(|o| o.iter().map(|s| s.to_string()).collect()),
            ground_truth: gt,
            split: Split::Test,
            extra: Default::default(),
        }
    }

    #[test]
    fn open_vqa_template() {
        let s = sample(TaskKind::VqaOpen, "What modality is this?", None, GroundTruth::Text("ct".into()));
        let r = render(&s).unwrap();
        assert_eq!(r.user_text(), "<image> given the image, please provide a brief answer to What modality is this?");
        assert_eq!(r.expected_format, ExpectedFormat::FreeText);
        assert_eq!(r.image_slots, 1);
    }

    #[test]
    fn closed_vqa_template() {
        let s = sample(TaskKind::VqaClosed, "Is there pneumonia?", Some(&["Yes", "No"]), GroundTruth::Choice(0));
        assert_eq!(
            render(&s).unwrap().user_text(),
            "<image> given the image, choose one option from the Yes\nNo to answer: Is there pneumonia?"
        );
    }

    #[test]
    fn landmark_template() {
        let gt = GroundTruth::Points(vec![NamedPoint { name: "sella".into(), point: Point2D::new(1.0, 2.0) }]);
        let s = sample(TaskKind::Landmark, "sella", None, gt);
        assert_eq!(
            render(&s).unwrap().user_text(),
            "<image> given the image, find the sella, the response is given in the format of [x,y]."
        );
    }

    #[test]
    fn multi_image_report_prefixes_each_image() {
        let mut s = sample(TaskKind::ReportGen, "", None, GroundTruth::Text("normal".into()));
        s.image_refs.push("b.png".into());
        let r = render(&s).unwrap();
        assert_eq!(r.image_slots, 2);
        assert!(r.user_text().starts_with("<image> <image> given the image, please review"));
    }

    #[test]
    fn detection_without_image_ref() {
        let mut s = sample(TaskKind::Detect2D, "pneumonia", None, GroundTruth::Box2D(Box2D::new(1, 2, 3, 4)));
        s.image_refs.clear();
        let r = render(&s).unwrap();
        assert_eq!(r.image_slots, 0);
        assert_eq!(r.user_text(), "Find <|object_ref_start|>pneumonia<|object_ref_end|> in this image.");
    }

    #[test]
    fn invalid_sample_is_rejected() {
        let s = sample(TaskKind::VqaClosed, "q", None, GroundTruth::Choice(0));
        assert!(matches!(render(&s), Err(RenderError::InvalidSample { .. })));
    }

    #[test]
    fn labels() {
        assert_eq!(
            render_label(&GroundTruth::Box2D(Box2D::new(156, 387, 421, 602)), &[]),
            "<|box_start|>(156,387),(421,602)<|box_end|>"
        );
        assert_eq!(render_label(&GroundTruth::Box3D(Box3D::new(1, 2, 3, 4, 5, 6)), &[]), "[(1,2,3),(4,5,6)]");
        let opts = vec!["Yes".to_string(), "No".to_string()];
        assert_eq!(render_label(&GroundTruth::Choice(0), &opts), "Yes");
        let pts = GroundTruth::Points(vec![NamedPoint { name: "s".into(), point: Point2D::new(812.0, 1044.5) }]);
        assert_eq!(render_label(&pts, &[]), "[812,1044.5]");
    }

    #[test]
    fn system_prompt_is_prepended() {
        let s = sample(TaskKind::VqaOpen, "q?", None, GroundTruth::Text("a".into()));
        let opts = RenderOptions { system_prompt: Some("be brief".into()), ..Default::default() };
        let r = render_with(&s, &opts).unwrap();
        assert_eq!(r.messages.len(), 2);
        assert_eq!(r.messages[0].role, Role::System);
        assert_eq!(r.prompt(), "be brief\n<image> given the image, please provide a brief answer to q?");
    }
}
