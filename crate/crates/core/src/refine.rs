//! ROI-guided refinement of a low-level feature map.
//!
//! Training: pick a pyramid level with the configured drop probabilities
//! (leftover mass means no drop), pick one of its ROIs uniformly, zero its
//! footprint and rescale the survivors by `count / count_ones`. Both modes
//! then crop the envelope of every ROI and resize it back to full size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::roi::{Rect, Roi};
use crate::tape::{CellRect, Tape, Var};
use crate::tensor::{Float, Shape, Tensor};

/// Where the refinement is applied in the raw-stage network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementPosition {
    /// The input image itself; the refined stage reruns the whole backbone.
    Input,
    /// Output of the stem convolution.
    Stem,
    /// Output of a backbone block.
    Block(usize),
    /// The lowest pyramid tap `B_n`.
    #[default]
    Tap0,
}

impl fmt::Display for RefinementPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefinementPosition::Input => write!(f, "input"),
            RefinementPosition::Stem => write!(f, "stem"),
            RefinementPosition::Block(i) => write!(f, "block{i}"),
            RefinementPosition::Tap0 => write!(f, "tap0"),
        }
    }
}

impl FromStr for RefinementPosition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "input" => Ok(RefinementPosition::Input),
            "stem" => Ok(RefinementPosition::Stem),
            "tap0" => Ok(RefinementPosition::Tap0),
            _ => s
                .strip_prefix("block")
                .and_then(|i| i.parse().ok())
                .map(RefinementPosition::Block)
                .ok_or_else(|| format!("unknown refinement position `{s}` (input, stem, blockN, tap0)")),
        }
    }
}

/// Per-image outcome of the refinement planning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementPlan {
    pub drop_roi: Option<Roi>,
    /// `[x1, x2, y1, y2]` envelope in input pixels.
    pub zoom_rect: Rect,
    pub drop_probs: Vec<f64>,
}

/// Draws a level index with probabilities `probs`; `None` for the residual mass.
pub fn select_level(probs: &[f64], rng: &mut Rng) -> Option<usize> {
    let u = rng.uniform();
    let mut cum = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return Some(k);
        }
    }
    None
}

pub fn validate_drop_probs(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || probs.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::Config(format!("drop probabilities {probs:?} must lie in [0, 1] and sum to at most 1")));
    }
    Ok(())
}

/// Picks the ROI to erase: a level by `probs`, then a uniform member of it.
/// Never drops outside training or when the chosen level is empty.
pub fn select_drop_roi(rois: &[Vec<Roi>], probs: &[f64], rng: &mut Rng, training: bool) -> Option<Roi> {
    if !training {
        return None;
    }
    let level = select_level(probs, rng)?;
    let candidates = rois.get(level)?;
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.below(candidates.len())])
}

/// Cell span `[start, end)` covered by pixel span `[lo, hi)` at `stride`,
/// rounding outward and clamped to `n` cells.
fn cell_span(lo: f32, hi: f32, stride: usize, n: usize) -> Option<(usize, usize)> {
    let s = stride as f32;
    let start = (lo / s).floor().max(0.0) as usize;
    let end = ((hi / s).ceil().max(0.0) as usize).min(n);
    (start < end).then_some((start, end))
}

/// Cells of an `h x w` grid covered by `rect`; `None` if it misses the grid.
pub fn rect_to_cells(rect: &Rect, stride: usize, h: usize, w: usize) -> Option<CellRect> {
    let (y0, y1) = cell_span(rect.y1, rect.y2, stride, h)?;
    let (x0, x1) = cell_span(rect.x1, rect.x2, stride, w)?;
    Some(CellRect { y0, y1, x0, x1 })
}

/// Drop mask `M` on an `h x w` grid: 0 inside the ROI footprint, 1 elsewhere.
/// A footprint missing the grid gives all ones.
pub fn drop_mask(h: usize, w: usize, roi: &Rect, stride: usize) -> Tensor<f32> {
    let cells = rect_to_cells(roi, stride, h, w);
    mask_from_cells(h, w, cells)
}

/// Like [`drop_mask`], but a footprint covering the whole grid loses its last
/// row (or column, for single-row grids) so at least one cell survives.
pub fn guarded_drop_mask(h: usize, w: usize, roi: &Rect, stride: usize) -> Tensor<f32> {
    let mut cells = rect_to_cells(roi, stride, h, w);
    if let Some(c) = cells.as_mut() {
        if c.height() == h && c.width() == w {
            if h > 1 {
                c.y1 -= 1;
            } else if w > 1 {
                c.x1 -= 1;
            } else {
                cells = None;
            }
        }
    }
    mask_from_cells(h, w, cells)
}

fn mask_from_cells(h: usize, w: usize, cells: Option<CellRect>) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, i, j]| match cells {
        Some(c) if (c.y0..c.y1).contains(&i) && (c.x0..c.x1).contains(&j) => 0.0,
        _ => 1.0,
    })
}

/// `D = B * M * count(M) / count_ones(M)`, with one `(1, 1, H, W)` mask per
/// batch item. Masks are constants; gradients flow to `B` only.
pub fn apply_dropblock<T: Float>(tape: &Tape<T>, features: Var, masks: &[Tensor<f32>]) -> Result<Var> {
    let s = tape.shape(features);
    if masks.len() != s.n() {
        return Err(Error::Config(format!("{} drop masks for batch {}", masks.len(), s.n())));
    }
    if masks.iter().all(|m| m.data().iter().all(|&v| v == 1.0)) {
        return Ok(features);
    }
    let plane = s.plane();
    let mut scaled = Vec::with_capacity(s.n() * plane);
    for m in masks {
        if m.shape() != Shape::new(1, 1, s.h(), s.w()) {
            return Err(Error::Shape { op: "apply_dropblock", lhs: s, rhs: m.shape() });
        }
        let ones = m.data().iter().filter(|&&v| v == 1.0).count();
        if ones == 0 {
            return Err(Error::EmptyDropMask);
        }
        let ratio = T::from_usize(plane) / T::from_usize(ones);
        scaled.extend(m.data().iter().map(|&v| T::from_f64(v as f64) * ratio));
    }
    let mask = tape.constant(Tensor::new(Shape::new(s.n(), 1, s.h(), s.w()), scaled)?);
    tape.ewise_mul(features, mask)
}

/// Minimum bounding rectangle of every ROI on every level; the full image
/// when there are none.
pub fn merge_rois(rois: &[Vec<Roi>], image_size: usize) -> Rect {
    let mut all = rois.iter().flatten();
    let Some(first) = all.next() else {
        return Rect::full(image_size);
    };
    all.fold(first.rect, |acc, r| {
        Rect::new(acc.x1.min(r.rect.x1), acc.y1.min(r.rect.y1), acc.x2.max(r.rect.x2), acc.y2.max(r.rect.y2))
    })
}

/// Zoom window in cells for a feature of `h x w` at `stride`: outward
/// rounding, clamped, at least one cell per axis.
pub fn zoom_cells(rect: &Rect, stride: usize, h: usize, w: usize) -> CellRect {
    let s = stride as f32;
    let axis = |lo: f32, hi: f32, n: usize| {
        let start = ((lo / s).floor().max(0.0) as usize).min(n - 1);
        let end = ((hi / s).ceil().max(0.0) as usize).clamp(start + 1, n);
        (start, end)
    };
    let (y0, y1) = axis(rect.y1, rect.y2, h);
    let (x0, x1) = axis(rect.x1, rect.x2, w);
    CellRect { y0, y1, x0, x1 }
}

/// `Z = bilinear(D[y1:y2, x1:x2])` back to `D`'s spatial size, per item.
pub fn zoom_in<T: Float>(tape: &Tape<T>, features: Var, rects: &[CellRect]) -> Result<Var> {
    let s = tape.shape(features);
    tape.crop_resize(features, rects, s.h(), s.w())
}

/// Options that change how a plan is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlanOptions {
    pub training: bool,
    /// Replace the drop ROI with a random box of the same size.
    pub random_drop: bool,
    /// Replace the merged rectangle with a random box of the same size.
    pub random_zoom: bool,
    /// Disable the zoom-in; the plan's rectangle becomes the full image.
    pub no_zoom: bool,
}

fn random_box_like(rect: &Rect, image_size: usize, rng: &mut Rng) -> Rect {
    let s = image_size as f32;
    let (w, h) = (rect.width().min(s), rect.height().min(s));
    let x1 = rng.uniform_range(0.0, (s - w) as f64) as f32;
    let y1 = rng.uniform_range(0.0, (s - h) as f64) as f32;
    Rect::new(x1, y1, x1 + w, y1 + h)
}

/// Draws the drop ROI and zoom rectangle for one image, consuming `rng`
/// in a fixed order.
pub fn plan(rois: &[Vec<Roi>], probs: &[f64], image_size: usize, options: PlanOptions, rng: &mut Rng) -> RefinementPlan {
    let mut drop_roi = select_drop_roi(rois, probs, rng, options.training);
    if options.random_drop {
        if let Some(r) = drop_roi.as_mut() {
            r.rect = random_box_like(&r.rect, image_size, rng);
        }
    }
    let zoom_rect = if options.no_zoom {
        Rect::full(image_size)
    } else {
        let merged = merge_rois(rois, image_size);
        if options.random_zoom {
            random_box_like(&merged, image_size, rng)
        } else {
            merged
        }
    };
    RefinementPlan {
        drop_roi,
        zoom_rect,
        drop_probs: probs.to_vec(),
    }
}

/// Applies plans to a feature batch at `stride`: dropblock (when a plan has
/// a drop ROI) then zoom-in.
pub fn refine<T: Float>(tape: &Tape<T>, features: Var, plans: &[RefinementPlan], stride: usize) -> Result<Var> {
    let s = tape.shape(features);
    if plans.len() != s.n() {
        return Err(Error::Config(format!("{} refinement plans for batch {}", plans.len(), s.n())));
    }
    let masks: Vec<Tensor<f32>> = plans
        .iter()
        .map(|p| match &p.drop_roi {
            Some(r) => guarded_drop_mask(s.h(), s.w(), &r.rect, stride),
            None => Tensor::ones(Shape::new(1, 1, s.h(), s.w())),
        })
        .collect();
    let dropped = apply_dropblock(tape, features, &masks)?;
    let rects: Vec<CellRect> = plans
        .iter()
        .map(|p| zoom_cells(&p.zoom_rect, stride, s.h(), s.w()))
        .collect();
    zoom_in(tape, dropped, &rects)
}
