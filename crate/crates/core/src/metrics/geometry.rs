use crate::record::{Box2D, Box3D, GroundTruth, ParsedOutput};

use super::{stable_mean, Aligned, MetricError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxDim {
    Two,
    Three,
}

/// Intersection over union on a half-open integer grid.
pub fn iou2d(a: &Box2D, b: &Box2D) -> f64 {
    let ix = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1));
    let iy = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1));
    let inter = u64::from(ix) * u64::from(iy);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        // Two zero-area boxes: identical ones still overlap perfectly.
        return if a == b { 1.0 } else { 0.0 };
    }
    inter as f64 / union as f64
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let ix = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1));
    let iy = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1));
    let iz = a.z2.min(b.z2).saturating_sub(a.z1.max(b.z1));
    let inter = u128::from(ix) * u128::from(iy) * u128::from(iz);
    let union = a.volume() + b.volume() - inter;
    if union == 0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter as f64 / union as f64
}

fn item_iou(item: &Aligned<'_>) -> f64 {
    match (&item.output, &item.sample.ground_truth) {
        (ParsedOutput::Box2D(p), GroundTruth::Box2D(g)) => iou2d(p, g),
        (ParsedOutput::Box3D(p), GroundTruth::Box3D(g)) => iou3d(p, g),
        _ => 0.0,
    }
}

/// Mean IoU with parse failures scored as zero.
///
/// 2D is reported as a fraction, 3D as a percentage.
pub fn mean_iou(items: &[Aligned<'_>], dim: BoxDim) -> Result<f64, MetricError> {
    let ious: Vec<f64> = items.iter().map(item_iou).collect();
    let mean = stable_mean(&ious).ok_or(MetricError::Empty)?;
    Ok(match dim {
        BoxDim::Two => mean,
        BoxDim::Three => 100.0 * mean,
    })
}
