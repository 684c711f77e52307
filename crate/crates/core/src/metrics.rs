//! Classification accuracy and box localization scores.

use serde::{Deserialize, Serialize};

use crate::roi::{iou, Rect};

/// Fraction of `predicted[i] == labels[i]`; 0 for an empty set.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub miou: f64,
    /// Fraction of scored images with IoU >= [`RECALL_IOU`].
    pub recall: f64,
    pub evaluated: usize,
    /// Images without a ground-truth box.
    pub skipped: usize,
}

pub const RECALL_IOU: f32 = 0.5;

/// Scores predicted boxes against ground truth; pairs lacking a GT box are
/// skipped and counted.
pub fn localization_scores(pairs: &[(Rect, Option<Rect>)]) -> LocalizationReport {
    let mut total = 0.0f64;
    let mut hits = 0usize;
    let mut evaluated = 0usize;
    for (pred, gt) in pairs {
        let Some(gt) = gt else { continue };
        let v = iou(pred, gt);
        total += v as f64;
        hits += usize::from(v >= RECALL_IOU);
        evaluated += 1;
    }
    let denom = evaluated.max(1) as f64;
    LocalizationReport {
        miou: total / denom,
        recall: hits as f64 / denom,
        evaluated,
        skipped: pairs.len() - evaluated,
    }
}
