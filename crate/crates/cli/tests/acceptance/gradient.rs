//! Finite-difference checks of every differentiable op and of the whole model.

use apcnn_core::gradcheck::{check_inputs, check_params, GradReport};
use apcnn_core::model::Mode;
use apcnn_core::refine::{apply_dropblock, guarded_drop_mask, refine, zoom_in};
use apcnn_core::{
    BackboneConfig, BlockConfig, CellRect, AttentionConfig, Model, ModelConfig, Rect, RefinementPlan, Result, Rng,
    Roi, RoiConfig, Shape, Tape, Tensor, Var,
};

pub const INSTANCES: usize = 20;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
const H: f64 = 1e-6;

fn normal(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of `H`.
fn away_from_zero(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform_range(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(normal(tape.shape(y), &mut Rng::new(seed)));
    tape.sum(tape.ewise_mul(y, r)?)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn random_cells(h: usize, w: usize, rng: &mut Rng) -> CellRect {
    let y0 = rng.below(h);
    let x0 = rng.below(w);
    CellRect {
        y0,
        y1: dim(rng, y0 + 1, h),
        x0,
        x1: dim(rng, x0 + 1, w),
    }
}

/// Worst report across `INSTANCES` seeded cases of one op.
fn worst(mut case: impl FnMut(&mut Rng) -> Result<GradReport>) -> Result<GradReport> {
    let mut worst: Option<GradReport> = None;
    for i in 0..INSTANCES {
        let r = case(&mut Rng::new(1000 + i as u64))?;
        if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    Ok(worst.expect("at least one instance"))
}

pub fn op_reports() -> Result<Vec<(&'static str, GradReport)>> {
    let mut out = Vec::new();
    out.push((
        "conv2d",
        worst(|rng| {
            let (n, c, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let (k, stride, pad) = ([1, 3][rng.below(2)], dim(rng, 1, 2), rng.below(2));
            let size = dim(rng, 3, 6);
            let inputs = [
                normal(Shape::new(n, c, size, size), rng),
                normal(Shape::new(co, c, k, k), rng),
                normal(Shape::vector(1, co), rng),
            ];
            check_inputs(&inputs, H, |t, v| project(t, t.conv2d(v[0], v[1], v[2], stride, pad)?, 1))
        })?,
    ));
    out.push((
        "deconv2d",
        worst(|rng| {
            let (n, c, co, h) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 5));
            let inputs = [
                normal(Shape::new(n, c, h, h + 1), rng),
                normal(Shape::new(c, co, 3, 3), rng),
                normal(Shape::vector(1, co), rng),
            ];
            check_inputs(&inputs, H, |t, v| project(t, t.deconv2d(v[0], v[1], v[2])?, 2))
        })?,
    ));
    out.push((
        "gap",
        worst(|rng| {
            let inputs = [normal(Shape::new(dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5)), rng)];
            check_inputs(&inputs, H, |t, v| project(t, t.gap(v[0])?, 3))
        })?,
    ));
    out.push((
        "fc",
        worst(|rng| {
            let (n, fin, fout) = (dim(rng, 1, 3), dim(rng, 1, 6), dim(rng, 1, 5));
            let inputs = [
                normal(Shape::vector(n, fin), rng),
                normal(Shape::new(fout, fin, 1, 1), rng),
                normal(Shape::vector(1, fout), rng),
            ];
            check_inputs(&inputs, H, |t, v| project(t, t.fc(v[0], v[1], v[2])?, 4))
        })?,
    ));
    out.push((
        "sigmoid",
        worst(|rng| {
            let inputs = [normal(Shape::new(2, dim(rng, 1, 3), 3, 3), rng)];
            check_inputs(&inputs, H, |t, v| project(t, t.sigmoid(v[0])?, 5))
        })?,
    ));
    out.push((
        "relu",
        worst(|rng| {
            let inputs = [away_from_zero(Shape::new(2, dim(rng, 1, 3), 3, 3), rng)];
            check_inputs(&inputs, H, |t, v| project(t, t.relu(v[0])?, 6))
        })?,
    ));
    out.push((
        "broadcast_add",
        worst(|rng| {
            let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            let other = [Shape::new(n, c, h, w), Shape::new(n, c, 1, 1), Shape::new(n, 1, h, w), Shape::new(1, c, 1, 1)];
            let inputs = [normal(Shape::new(n, c, h, w), rng), normal(other[rng.below(4)], rng)];
            check_inputs(&inputs, H, |t, v| project(t, t.broadcast_add(v[0], v[1])?, 7))
        })?,
    ));
    out.push((
        "ewise_mul",
        worst(|rng| {
            let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
            let other = [Shape::new(n, c, h, w), Shape::new(n, c, 1, 1), Shape::new(n, 1, h, w), Shape::new(1, c, 1, 1)];
            let inputs = [normal(Shape::new(n, c, h, w), rng), normal(other[rng.below(4)], rng)];
            check_inputs(&inputs, H, |t, v| project(t, t.ewise_mul(v[0], v[1])?, 8))
        })?,
    ));
    out.push((
        "bilinear_resize",
        worst(|rng| {
            let inputs = [normal(Shape::new(dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 6), dim(rng, 1, 6)), rng)];
            let (oh, ow) = (dim(rng, 1, 8), dim(rng, 1, 8));
            check_inputs(&inputs, H, |t, v| project(t, t.bilinear_resize(v[0], oh, ow)?, 9))
        })?,
    ));
    out.push((
        "crop_resize",
        worst(|rng| {
            let (n, h, w) = (dim(rng, 1, 2), dim(rng, 2, 6), dim(rng, 2, 6));
            let rects: Vec<CellRect> = (0..n).map(|_| random_cells(h, w, rng)).collect();
            let inputs = [normal(Shape::new(n, 2, h, w), rng)];
            check_inputs(&inputs, H, |t, v| project(t, t.crop_resize(v[0], &rects, h, w)?, 10))
        })?,
    ));
    out.push((
        "sum",
        worst(|rng| {
            let inputs = [normal(Shape::new(dim(rng, 1, 3), 2, 3, dim(rng, 1, 4)), rng)];
            check_inputs(&inputs, H, |t, v| t.sum(t.ewise_mul(v[0], v[0])?))
        })?,
    ));
    out.push((
        "scale",
        worst(|rng| {
            let k = rng.normal();
            let inputs = [normal(Shape::new(2, 2, 2, dim(rng, 1, 4)), rng)];
            check_inputs(&inputs, H, |t, v| project(t, t.scale(v[0], k)?, 11))
        })?,
    ));
    out.push((
        "softmax_xent",
        worst(|rng| {
            let (n, k) = (dim(rng, 1, 4), dim(rng, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let inputs = [normal(Shape::vector(n, k), rng).map(|v| 3.0 * v)];
            check_inputs(&inputs, H, |t, v| t.softmax_xent(v[0], &labels))
        })?,
    ));
    out.push((
        "dropblock",
        worst(|rng| {
            let (h, w, stride) = (dim(rng, 2, 6), dim(rng, 2, 6), 8);
            let x1 = rng.uniform_range(0.0, (w * stride) as f64 - 4.0) as f32;
            let y1 = rng.uniform_range(0.0, (h * stride) as f64 - 4.0) as f32;
            let roi = Rect::new(x1, y1, x1 + 9.0, y1 + 9.0);
            let mask = guarded_drop_mask(h, w, &roi, stride);
            let inputs = [normal(Shape::new(1, 2, h, w), rng)];
            check_inputs(&inputs, H, |t, v| project(t, apply_dropblock(t, v[0], std::slice::from_ref(&mask))?, 12))
        })?,
    ));
    out.push((
        "zoom_in",
        worst(|rng| {
            let (h, w) = (dim(rng, 2, 6), dim(rng, 2, 6));
            let rects = [random_cells(h, w, rng)];
            let inputs = [normal(Shape::new(1, 3, h, w), rng)];
            check_inputs(&inputs, H, |t, v| project(t, zoom_in(t, v[0], &rects)?, 13))
        })?,
    ));
    out.push((
        "refine",
        worst(|rng| {
            let size = 8 * dim(rng, 2, 5);
            let g = size / 8;
            let a = rng.uniform_range(0.0, size as f64 / 2.0) as f32;
            let plan = RefinementPlan {
                drop_roi: Some(Roi {
                    level: 0,
                    rect: Rect::new(a, a, a + 8.0, a + 8.0),
                    score: 1.0,
                }),
                zoom_rect: Rect::new(0.0, a, size as f32 - a / 2.0, size as f32),
                drop_probs: vec![0.3, 0.3, 0.0],
            };
            let inputs = [normal(Shape::new(1, 2, g, g), rng)];
            check_inputs(&inputs, H, |t, v| project(t, refine(t, v[0], std::slice::from_ref(&plan), 8)?, 14))
        })?,
    ));
    Ok(out)
}

/// Two classes, 32x32 input, pyramid width 8.
pub fn toy_config() -> ModelConfig {
    let block = |out_channels| BlockConfig {
        num_convs: 1,
        out_channels,
        downsample: true,
    };
    ModelConfig {
        backbone: BackboneConfig {
            input_size: 32,
            in_channels: 3,
            stem_channels: 4,
            blocks: vec![block(4), block(6), block(8), block(8)],
            tap_indices: vec![1, 2, 3],
            residual: false,
        },
        attention: AttentionConfig {
            fpn_channels: 8,
            reduction: 4,
            ..Default::default()
        },
        roi: RoiConfig::for_input(32),
        num_classes: 2,
        ..Default::default()
    }
}

/// End-to-end check on 10 random parameter elements per instance, with the
/// refinement plan held fixed so the loss is a smooth function of them.
pub fn model_report() -> Result<GradReport> {
    worst(|rng| {
        let model = Model::<f64>::new(toy_config(), rng.below(1 << 20) as u64)?;
        let images = Tensor::from_fn(Shape::new(2, 3, 32, 32), |_| rng.uniform());
        let labels = [rng.below(2), rng.below(2)];
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let plans = model.forward(&tape, x, Mode::Train, rng)?.plans;
        let params = model.store().params().to_vec();
        // Zero-initialised biases put units with an all-zero receptive field
        // exactly on the ReLU kink; move them off it.
        for p in params.iter().filter(|p| p.id().ends_with(".b")) {
            let jitter = away_from_zero(p.shape(), rng).map(|v| 0.1 * v);
            p.update(|d| d.copy_from_slice(jitter.data()));
        }
        let probes: Vec<(usize, usize)> = (0..10)
            .map(|_| {
                let p = rng.below(params.len());
                (p, rng.below(params[p].shape().numel()))
            })
            .collect();
        check_params(&params, &probes, H, |t| {
            let x = t.constant(images.clone());
            let out = model.forward_with_plans(t, x, &plans)?;
            model.loss(t, &out, &labels)
        })
    })
}
