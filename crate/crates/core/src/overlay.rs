//! ROI overlays and per-image forward traces.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_ppm, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, Prediction};
use crate::refine::RefinementPlan;
use crate::roi::{Rect, Roi};
use crate::tensor::Tensor;
use crate::train::evaluate;

/// Rectangle colours by pyramid level: low green, middle blue, high red.
pub const LEVEL_COLORS: [[f32; 3]; 3] = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];

pub fn level_color(level: usize, levels: usize) -> [f32; 3] {
    match levels {
        0 | 1 => LEVEL_COLORS[2],
        _ if level == 0 => LEVEL_COLORS[0],
        _ if level + 1 >= levels => LEVEL_COLORS[2],
        _ => LEVEL_COLORS[1],
    }
}

/// Pixel bounds `[x0, x1] x [y0, y1]` (inclusive) a rectangle is drawn on.
pub fn pixel_bounds(rect: &Rect, size: usize) -> (usize, usize, usize, usize) {
    let last = size as f32 - 1.0;
    let px = |v: f32| v.clamp(0.0, last) as usize;
    (px(rect.x1), px(rect.x2 - 1.0), px(rect.y1), px(rect.y2 - 1.0))
}

/// Draws a one-pixel rectangle outline in place.
pub fn draw_rect(image: &mut Tensor<f32>, rect: &Rect, color: [f32; 3]) {
    let s = image.shape();
    let (x0, x1, y0, y1) = pixel_bounds(rect, s.w().min(s.h()));
    for (c, &v) in color.iter().enumerate() {
        for x in x0..=x1 {
            image.set([0, c, y0, x], v);
            image.set([0, c, y1, x], v);
        }
        for y in y0..=y1 {
            image.set([0, c, y, x0], v);
            image.set([0, c, y, x1], v);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: String,
    pub label: usize,
    pub predicted: usize,
    /// Per level.
    pub rois: Vec<Vec<Roi>>,
    pub plan: Option<RefinementPlan>,
    pub prediction: Prediction,
}

/// Eval-mode traces for every item of `dataset`.
pub fn trace(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<Vec<TraceRecord>> {
    let out = evaluate(model, dataset, batch_size)?;
    let size = model.config().backbone.input_size;
    Ok(dataset
        .items
        .iter()
        .zip(out.predictions)
        .zip(out.rois)
        .zip(out.boxes)
        .map(|(((item, prediction), rois), zoom)| TraceRecord {
            image_id: item.name.clone(),
            label: item.label,
            predicted: prediction.class(),
            plan: model.config().two_stage.then(|| RefinementPlan {
                drop_roi: None,
                zoom_rect: zoom.unwrap_or(Rect::full(size)),
                drop_probs: model.config().drop_probs.clone(),
            }),
            rois,
            prediction,
        })
        .collect())
}

pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes `<out_dir>/<image_id>.ppm` with level-coloured ROIs for the first
/// `limit` items, plus `<out_dir>/trace.jsonl` covering the same items.
pub fn export_overlays(model: &Model<f32>, dataset: &Dataset, out_dir: &Path, limit: usize) -> Result<Vec<TraceRecord>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let subset = Dataset {
        items: dataset.items.iter().take(limit).cloned().collect(),
        ..dataset.clone()
    };
    let records = trace(model, &subset, 16)?;
    let levels = model.config().num_levels();
    for (item, record) in subset.items.iter().zip(&records) {
        let mut image = item.image.clone();
        for roi in record.rois.iter().flatten() {
            draw_rect(&mut image, &roi.rect, level_color(roi.level, levels));
        }
        write_ppm(&out_dir.join(format!("{}.ppm", item.name)), &image)?;
    }
    write_trace(&records, &out_dir.join("trace.jsonl"))?;
    Ok(records)
}
