//! ROI pyramid from the spatial attention masks.
//!
//! Each level gets one square anchor per attention cell, centred on the
//! cell's input-space centre and clipped to the image. Anchors are scored by
//! the mean attention over the cells whose centres they cover, pruned with
//! greedy NMS, and the best `xi_k` survivors form that level's ROIs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned half-open box `[x1, x2) x [y1, y2)` in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl Rect {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Rect { x1, y1, x2, y2 }
    }

    pub fn full(size: usize) -> Self {
        Rect::new(0.0, 0.0, size as f32, size as f32)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn clip(&self, size: usize) -> Rect {
        let s = size as f32;
        Rect::new(self.x1.clamp(0.0, s), self.y1.clamp(0.0, s), self.x2.clamp(0.0, s), self.y2.clamp(0.0, s))
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &Rect, b: &Rect) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A scored region from one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub level: usize,
    #[serde(flatten)]
    pub rect: Rect,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    /// Anchor side per level, in input pixels. Aspect ratio is fixed at 1:1.
    pub anchor_scales: Vec<f32>,
    /// How many ROIs each level keeps.
    pub xi: Vec<usize>,
    pub nms_iou: f32,
}

/// Reference anchor sides at a 448-pixel input.
pub const REFERENCE_SCALES: [f32; 3] = [64.0, 128.0, 256.0];
pub const REFERENCE_INPUT: usize = 448;

impl RoiConfig {
    /// Reference anchor sides scaled linearly to `input_size` and rounded.
    pub fn for_input(input_size: usize) -> Self {
        let anchor_scales = REFERENCE_SCALES
            .iter()
            .map(|s| (s * input_size as f32 / REFERENCE_INPUT as f32).round())
            .collect();
        RoiConfig {
            anchor_scales,
            xi: vec![5, 3, 1],
            nms_iou: 0.05,
        }
    }

    pub fn validate(&self, levels: usize, input_size: usize) -> Result<()> {
        if self.anchor_scales.len() != levels || self.xi.len() != levels {
            return Err(Error::Config(format!(
                "ROI config lists {} scales and {} top-k counts for {levels} levels",
                self.anchor_scales.len(),
                self.xi.len()
            )));
        }
        if let Some(s) = self.anchor_scales.iter().find(|&&s| s <= 0.0 || s > input_size as f32) {
            return Err(Error::Config(format!("anchor scale {s} outside (0, {input_size}]")));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("NMS threshold {} outside [0, 1]", self.nms_iou)));
        }
        Ok(())
    }
}

/// One anchor per `h x w` attention cell, row-major, clipped to the image.
pub fn gen_anchors(h: usize, w: usize, stride: usize, scale: f32, image_size: usize) -> Vec<Rect> {
    let half = scale / 2.0;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let cx = (j as f32 + 0.5) * stride as f32;
            let cy = (i as f32 + 0.5) * stride as f32;
            out.push(Rect::new(cx - half, cy - half, cx + half, cy + half).clip(image_size));
        }
    }
    out
}

/// Cell indices along one axis whose centres lie in `[lo, hi)`.
fn covered_cells(lo: f32, hi: f32, stride: usize, n: usize) -> std::ops::Range<usize> {
    let s = stride as f64;
    // centre (k + 0.5) * s >= lo  <=>  k >= lo / s - 0.5
    let first = ((lo as f64 / s - 0.5).ceil().max(0.0) as usize).min(n);
    let end = ((hi as f64 / s - 0.5).ceil().max(0.0) as usize).min(n);
    first..end.max(first)
}

/// Mean attention over covered cell centres; the nearest cell when none is covered.
pub fn score_anchor(anchor: &Rect, mask: &[f32], h: usize, w: usize, stride: usize) -> f32 {
    let rows = covered_cells(anchor.y1, anchor.y2, stride, h);
    let cols = covered_cells(anchor.x1, anchor.x2, stride, w);
    if rows.is_empty() || cols.is_empty() {
        let cy = (anchor.y1 + anchor.y2) / 2.0;
        let cx = (anchor.x1 + anchor.x2) / 2.0;
        let i = ((cy / stride as f32).floor().max(0.0) as usize).min(h - 1);
        let j = ((cx / stride as f32).floor().max(0.0) as usize).min(w - 1);
        return mask[i * w + j];
    }
    let count = rows.len() * cols.len();
    let mut sum = 0.0f64;
    for i in rows {
        for j in cols.clone() {
            sum += mask[i * w + j] as f64;
        }
    }
    (sum / count as f64) as f32
}

pub fn score_anchors(anchors: &[Rect], mask: &[f32], h: usize, w: usize, stride: usize) -> Vec<f32> {
    anchors
        .iter()
        .map(|a| score_anchor(a, mask, h, w, stride))
        .collect()
}

/// Descending score, then lower `y1`, then lower `x1`.
pub fn rank_order(a: &Roi, b: &Roi) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.rect.y1.total_cmp(&b.rect.y1))
        .then(a.rect.x1.total_cmp(&b.rect.x1))
}

/// Greedy NMS: keeps the best remaining box and drops every box whose IoU
/// with a kept box exceeds `threshold`. Output is in rank order.
pub fn nms(mut boxes: Vec<Roi>, threshold: f32) -> Vec<Roi> {
    boxes.sort_by(rank_order);
    let mut kept: Vec<Roi> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| iou(&k.rect, &b.rect) <= threshold) {
            kept.push(b);
        }
    }
    kept
}

/// A level's spatial attention for one image.
#[derive(Clone, Copy, Debug)]
pub struct LevelMask<'a> {
    pub values: &'a [f32],
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

/// `R_all` for one image: per level, anchors -> scores -> NMS -> top `xi_k`.
pub fn build_roi_pyramid(masks: &[LevelMask<'_>], config: &RoiConfig, image_size: usize) -> Result<Vec<Vec<Roi>>> {
    config.validate(masks.len(), image_size)?;
    Ok(masks
        .iter()
        .enumerate()
        .map(|(level, m)| {
            let anchors = gen_anchors(m.h, m.w, m.stride, config.anchor_scales[level], image_size);
            let scores = score_anchors(&anchors, m.values, m.h, m.w, m.stride);
            let candidates = anchors
                .into_iter()
                .zip(scores)
                .map(|(rect, score)| Roi { level, rect, score })
                .collect();
            let mut kept = nms(candidates, config.nms_iou);
            kept.truncate(config.xi[level]);
            kept
        })
        .collect())
}
