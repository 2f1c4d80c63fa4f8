//! Building blocks for constructing medical vision-language training corpora
//! and scoring model predictions against them.
//!
//! * [`record`]: the unified sample schema.
//! * [`templates`]: instruction and label rendering.
//! * [`parse`]: grammars for grounded outputs and answer normalization.
//! * [`metrics`]: accuracy, text overlap, IoU and landmark error statistics.
//! * [`dataengine`]: manifest-driven ingest, split checks, alignment and
//!   instruction-tuning corpus builders.

pub mod dataengine;
pub mod metrics;
pub mod parse;
pub mod record;
pub mod templates;

pub use record::{
    validate_sample, Box2D, Box3D, GroundTruth, Language, NamedPoint, ParsedOutput, Point2D, Prediction, Sample, Split,
    TaskFamily, TaskKind,
};
