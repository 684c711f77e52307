//! Brute-force oracles for the numeric kernels and the ROI machinery.

use apcnn_core::refine::{apply_dropblock, drop_mask, merge_rois};
use apcnn_core::roi::{build_roi_pyramid, iou, nms, score_anchor, LevelMask};
use apcnn_core::{Rect, Result, Rng, Roi, RoiConfig, Shape, Tape, Tensor};

pub const INSTANCES: usize = 100;

pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.max_error <= self.tolerance
    }
}

fn run(name: &'static str, tolerance: f64, mut case: impl FnMut(&mut Rng) -> Result<f64>) -> Result<OracleResult> {
    let mut max_error = 0.0f64;
    for i in 0..INSTANCES {
        let e = case(&mut Rng::new(5000 + i as u64))?;
        max_error = max_error.max(e);
    }
    Ok(OracleResult {
        name,
        instances: INSTANCES,
        max_error,
        tolerance,
    })
}

fn normal(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h();
    let oh = (xs.h() + 2 * pad - k) / stride + 1;
    let ow = (xs.w() + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for n in 0..xs.n() {
        for co in 0..ws.n() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..xs.c() {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h() && (ix as usize) < xs.w() {
                                    acc += x.at([n, ci, iy as usize, ix as usize]) * w.at([co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Transposed 3x3 convolution by scattering every input pixel.
fn deconv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let xs = x.shape();
    let co_n = w.shape().c();
    let (h, wd) = (xs.h(), xs.w());
    let mut out = vec![0.0; xs.n() * co_n * h * wd];
    for n in 0..xs.n() {
        for co in 0..co_n {
            for v in &mut out[(n * co_n + co) * h * wd..(n * co_n + co + 1) * h * wd] {
                *v = b.data()[co];
            }
            for ci in 0..xs.c() {
                for i in 0..h {
                    for j in 0..wd {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (oy, ox) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if oy >= 0 && ox >= 0 && (oy as usize) < h && (ox as usize) < wd {
                                    out[((n * co_n + co) * h + oy as usize) * wd + ox as usize] +=
                                        x.at([n, ci, i, j]) * w.at([ci, co, ky, kx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Half-pixel-centre bilinear sampling with edge clamping.
fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Vec<f64> {
    let s = x.shape();
    let coord = |d: usize, len: usize, out: usize| -> (usize, usize, f64) {
        let src = ((d as f64 + 0.5) * len as f64 / out as f64 - 0.5).max(0.0).min((len - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(len - 1), src - lo as f64)
    };
    let mut out = Vec::new();
    for n in 0..s.n() {
        for c in 0..s.c() {
            for oy in 0..oh {
                let (y0, y1, fy) = coord(oy, s.h(), oh);
                for ox in 0..ow {
                    let (x0, x1, fx) = coord(ox, s.w(), ow);
                    let v00 = x.at([n, c, y0, x0]);
                    let v01 = x.at([n, c, y0, x1]);
                    let v10 = x.at([n, c, y1, x0]);
                    let v11 = x.at([n, c, y1, x1]);
                    out.push(v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx);
                }
            }
        }
    }
    out
}

fn softmax_xent_oracle(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let k = logits.shape().item_len();
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[l];
    }
    total / labels.len() as f64
}

fn tape_value(f: impl FnOnce(&Tape<f64>) -> Result<apcnn_core::Var>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let v = f(&tape)?;
    Ok(tape.value(v).data().to_vec())
}

fn int_rect(rng: &mut Rng, size: usize) -> Rect {
    let x1 = rng.below(size);
    let y1 = rng.below(size);
    let x2 = dim(rng, x1 + 1, size);
    let y2 = dim(rng, y1 + 1, size);
    Rect::new(x1 as f32, y1 as f32, x2 as f32, y2 as f32)
}

/// IoU by counting unit pixels of integer rectangles.
fn iou_oracle(a: &Rect, b: &Rect, size: usize) -> f64 {
    let inside = |r: &Rect, x: usize, y: usize| {
        let (x, y) = (x as f32 + 0.5, y as f32 + 0.5);
        x > r.x1 && x < r.x2 && y > r.y1 && y < r.y2
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..size {
        for x in 0..size {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn rank_key(r: &Roi) -> (std::cmp::Reverse<u32>, u32, u32) {
    // scores are non-negative in these cases, so bit order matches numeric order
    (std::cmp::Reverse(r.score.to_bits()), r.rect.y1.to_bits(), r.rect.x1.to_bits())
}

/// A box survives iff no higher-ranked surviving box overlaps it above the threshold.
fn nms_oracle(boxes: &[Roi], threshold: f32) -> Vec<Roi> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by_key(rank_key);
    let mut keep = vec![false; sorted.len()];
    for i in 0..sorted.len() {
        keep[i] = (0..i).all(|j| !keep[j] || iou(&sorted[j].rect, &sorted[i].rect) <= threshold);
    }
    sorted.into_iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).collect()
}

/// Mean over cells whose centre lies inside the anchor, by scanning every
/// cell; the cell under the anchor centre when none does.
fn score_oracle(anchor: &Rect, mask: &[f32], h: usize, w: usize, stride: usize) -> f32 {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for i in 0..h {
        for j in 0..w {
            let cy = (i as f64 + 0.5) * stride as f64;
            let cx = (j as f64 + 0.5) * stride as f64;
            if cy >= anchor.y1 as f64 && cy < anchor.y2 as f64 && cx >= anchor.x1 as f64 && cx < anchor.x2 as f64 {
                sum += mask[i * w + j] as f64;
                count += 1;
            }
        }
    }
    if count > 0 {
        return (sum / count as f64) as f32;
    }
    let cy = (anchor.y1 + anchor.y2) / 2.0;
    let cx = (anchor.x1 + anchor.x2) / 2.0;
    let i = ((cy / stride as f32) as usize).min(h - 1);
    let j = ((cx / stride as f32) as usize).min(w - 1);
    mask[i * w + j]
}

/// Scores are drawn from a small grid of values so that ties occur.
fn tied_mask(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| rng.below(5) as f32 / 4.0).collect()
}

pub fn reports() -> Result<Vec<OracleResult>> {
    let mut out = Vec::new();
    out.push(run("conv2d", 1e-10, |rng| {
        let (n, c, co) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4));
        let (k, stride, pad) = ([1, 3][rng.below(2)], dim(rng, 1, 2), rng.below(2));
        let size = dim(rng, 3, 8);
        let x = normal(Shape::new(n, c, size, size + 1), rng);
        let w = normal(Shape::new(co, c, k, k), rng);
        let b = normal(Shape::vector(1, co), rng);
        let got = tape_value(|t| t.conv2d(t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()), stride, pad))?;
        Ok(max_diff(&got, &conv_oracle(&x, &w, &b, stride, pad)))
    })?);
    out.push(run("deconv2d", 1e-10, |rng| {
        let (n, c, co, h) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 7));
        let x = normal(Shape::new(n, c, h, dim(rng, 1, 7)), rng);
        let w = normal(Shape::new(c, co, 3, 3), rng);
        let b = normal(Shape::vector(1, co), rng);
        let got = tape_value(|t| t.deconv2d(t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone())))?;
        Ok(max_diff(&got, &deconv_oracle(&x, &w, &b)))
    })?);
    out.push(run("gap", 1e-12, |rng| {
        let x = normal(Shape::new(dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 6), dim(rng, 1, 6)), rng);
        let plane = x.shape().plane();
        let expected: Vec<f64> = x.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
        let got = tape_value(|t| t.gap(t.constant(x.clone())))?;
        Ok(max_diff(&got, &expected))
    })?);
    out.push(run("fc", 1e-12, |rng| {
        let (n, fin, fout) = (dim(rng, 1, 4), dim(rng, 1, 9), dim(rng, 1, 7));
        let x = normal(Shape::vector(n, fin), rng);
        let w = normal(Shape::new(fout, fin, 1, 1), rng);
        let b = normal(Shape::vector(1, fout), rng);
        let mut expected = Vec::new();
        for i in 0..n {
            for o in 0..fout {
                expected.push(b.data()[o] + (0..fin).map(|j| w.data()[o * fin + j] * x.data()[i * fin + j]).sum::<f64>());
            }
        }
        let got = tape_value(|t| t.fc(t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone())))?;
        Ok(max_diff(&got, &expected))
    })?);
    out.push(run("bilinear_resize", 1e-12, |rng| {
        let x = normal(Shape::new(dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 7), dim(rng, 1, 7)), rng);
        let (oh, ow) = (dim(rng, 1, 12), dim(rng, 1, 12));
        let got = tape_value(|t| t.bilinear_resize(t.constant(x.clone()), oh, ow))?;
        Ok(max_diff(&got, &bilinear_oracle(&x, oh, ow)))
    })?);
    out.push(run("softmax_xent", 1e-12, |rng| {
        let (n, k) = (dim(rng, 1, 5), dim(rng, 2, 8));
        let logits = normal(Shape::vector(n, k), rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let got = tape_value(|t| t.softmax_xent(t.constant(logits.clone()), &labels))?;
        Ok((got[0] - softmax_xent_oracle(&logits, &labels)).abs())
    })?);
    out.push(run("iou", 1e-6, |rng| {
        let (a, b) = (int_rect(rng, 24), int_rect(rng, 24));
        Ok((iou(&a, &b) as f64 - iou_oracle(&a, &b, 24)).abs())
    })?);
    out.push(run("nms", 0.0, |rng| {
        let boxes: Vec<Roi> = (0..20)
            .map(|_| Roi {
                level: 0,
                rect: int_rect(rng, 32),
                score: rng.below(6) as f32 / 5.0,
            })
            .collect();
        let thr = [0.0, 0.05, 0.3, 0.7][rng.below(4)];
        Ok(if nms(boxes.clone(), thr) == nms_oracle(&boxes, thr) { 0.0 } else { 1.0 })
    })?);
    out.push(run("anchor_scoring", 1e-6, |rng| {
        let (h, w, stride) = (dim(rng, 1, 6), dim(rng, 1, 6), [4, 8, 16][rng.below(3)]);
        let mask: Vec<f32> = (0..h * w).map(|_| rng.uniform() as f32).collect();
        let size = h.max(w) * stride;
        let x1 = rng.uniform_range(-8.0, size as f64) as f32;
        let y1 = rng.uniform_range(-8.0, size as f64) as f32;
        let side = rng.uniform_range(1.0, size as f64) as f32;
        let anchor = Rect::new(x1, y1, x1 + side, y1 + side).clip(size);
        if !anchor.is_valid() {
            return Ok(0.0);
        }
        Ok((score_anchor(&anchor, &mask, h, w, stride) - score_oracle(&anchor, &mask, h, w, stride)).abs() as f64)
    })?);
    out.push(run("top_xi_selection", 0.0, |rng| {
        let size = 32 * dim(rng, 1, 3);
        let config = RoiConfig::for_input(size);
        let strides = [8, 16, 32];
        let masks: Vec<Vec<f32>> = strides.iter().map(|s| tied_mask((size / s) * (size / s), rng)).collect();
        let levels: Vec<LevelMask<'_>> = strides
            .iter()
            .zip(&masks)
            .map(|(&s, m)| LevelMask { values: m, h: size / s, w: size / s, stride: s })
            .collect();
        let got = build_roi_pyramid(&levels, &config, size)?;
        let mut mismatch = 0.0;
        for (k, (&s, m)) in strides.iter().zip(&masks).enumerate() {
            let g = size / s;
            let half = config.anchor_scales[k] / 2.0;
            let mut all = Vec::new();
            for i in 0..g {
                for j in 0..g {
                    let (cx, cy) = ((j as f32 + 0.5) * s as f32, (i as f32 + 0.5) * s as f32);
                    let rect = Rect::new(cx - half, cy - half, cx + half, cy + half).clip(size);
                    all.push(Roi { level: k, rect, score: score_oracle(&rect, m, g, g, s) });
                }
            }
            let mut expected = nms_oracle(&all, config.nms_iou);
            expected.truncate(config.xi[k]);
            if got[k] != expected {
                mismatch = 1.0;
            }
        }
        Ok(mismatch)
    })?);
    out.push(run("roi_merge", 0.0, |rng| {
        let size = 96;
        let rois: Vec<Vec<Roi>> = (0..3)
            .map(|level| (0..rng.below(4)).map(|_| Roi { level, rect: int_rect(rng, size), score: 0.5 }).collect())
            .collect();
        let all: Vec<&Roi> = rois.iter().flatten().collect();
        let expected = if all.is_empty() {
            Rect::full(size)
        } else {
            Rect::new(
                all.iter().map(|r| r.rect.x1).fold(f32::INFINITY, f32::min),
                all.iter().map(|r| r.rect.y1).fold(f32::INFINITY, f32::min),
                all.iter().map(|r| r.rect.x2).fold(f32::NEG_INFINITY, f32::max),
                all.iter().map(|r| r.rect.y2).fold(f32::NEG_INFINITY, f32::max),
            )
        };
        Ok(if merge_rois(&rois, size) == expected { 0.0 } else { 1.0 })
    })?);
    out.push(run("drop_mask", 0.0, |rng| {
        let (h, w, stride) = (dim(rng, 1, 8), dim(rng, 1, 8), [1, 2, 4, 8][rng.below(4)]);
        let x1 = rng.uniform_range(0.0, (w * stride) as f64) as f32;
        let y1 = rng.uniform_range(0.0, (h * stride) as f64) as f32;
        let roi = Rect::new(x1, y1, x1 + rng.uniform_range(0.5, 20.0) as f32, y1 + rng.uniform_range(0.5, 20.0) as f32);
        let m = drop_mask(h, w, &roi, stride);
        let mut wrong = 0.0;
        for i in 0..h {
            for j in 0..w {
                // cell [i*s, (i+1)*s) x [j*s, (j+1)*s) meets the open ROI interior
                let s = stride as f32;
                let hit = (i as f32 * s) < roi.y2 && ((i + 1) as f32 * s) > roi.y1 && (j as f32 * s) < roi.x2 && ((j + 1) as f32 * s) > roi.x1;
                if m.at([0, 0, i, j]) != if hit { 0.0 } else { 1.0 } {
                    wrong = 1.0;
                }
            }
        }
        Ok(wrong)
    })?);
    out.push(run("dropblock_scaling", 1e-12, |rng| {
        let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 6), dim(rng, 1, 6));
        let b = normal(Shape::new(n, c, h, w), rng);
        let masks: Vec<Tensor<f32>> = (0..n)
            .map(|_| {
                let mut m = Tensor::from_fn(Shape::new(1, 1, h, w), |_| if rng.uniform() < 0.3 { 0.0 } else { 1.0 });
                m.set([0, 0, rng.below(h), rng.below(w)], 1.0);
                m
            })
            .collect();
        let got = tape_value(|t| apply_dropblock(t, t.constant(b.clone()), &masks))?;
        let mut expected = Vec::new();
        for (i, m) in masks.iter().enumerate() {
            let ones = m.data().iter().filter(|&&v| v == 1.0).count() as f64;
            let ratio = (h * w) as f64 / ones;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        expected.push(b.at([i, ch, y, x]) * m.at([0, 0, y, x]) as f64 * ratio);
                    }
                }
            }
        }
        Ok(max_diff(&got, &expected))
    })?);
    Ok(out)
}
