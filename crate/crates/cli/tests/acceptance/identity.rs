//! Exact identities and degenerate configurations.

use apcnn_core::model::Mode;
use apcnn_core::pyramid::{weight_features, Pyramid};
use apcnn_core::refine::{apply_dropblock, select_drop_roi, zoom_cells, zoom_in};
use apcnn_core::{
    AttentionConfig, Model, ParamStore, Rect, Result, Rng, Roi, Shape, Tape, Tensor,
};

use crate::gradient::toy_config;

fn random(shape: Shape, rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

/// Spatial and channel masks of exactly one half leave features unchanged.
pub fn half_masks_pass_features() -> Result<bool> {
    let mut rng = Rng::new(1);
    let tape = Tape::<f32>::new();
    let f = random(Shape::new(2, 4, 5, 5), &mut rng);
    let fv = tape.constant(f.clone());
    let s = tape.constant(Tensor::full(Shape::new(2, 1, 5, 5), 0.5));
    let c = tape.constant(Tensor::full(Shape::vector(2, 4), 0.5));
    let out = weight_features(&tape, fv, Some(s), Some(c))?;
    Ok(*tape.value(out) == f)
}

pub fn all_ones_mask_is_identity() -> Result<bool> {
    let tape = Tape::<f32>::new();
    let b = random(Shape::new(3, 4, 6, 6), &mut Rng::new(2));
    let bv = tape.constant(b.clone());
    let masks = vec![Tensor::ones(Shape::new(1, 1, 6, 6)); 3];
    let d = apply_dropblock(&tape, bv, &masks)?;
    Ok(*tape.value(d) == b)
}

pub fn full_extent_zoom_is_identity() -> Result<bool> {
    let tape = Tape::<f32>::new();
    let d = random(Shape::new(2, 4, 12, 12), &mut Rng::new(3));
    let dv = tape.constant(d.clone());
    let cells = zoom_cells(&Rect::full(96), 8, 12, 12);
    let z = zoom_in(&tape, dv, &[cells, cells])?;
    Ok(*tape.value(z) == d)
}

pub fn zero_probabilities_never_drop() -> bool {
    let rois: Vec<Vec<Roi>> = (0..3)
        .map(|level| {
            vec![Roi {
                level,
                rect: Rect::new(0.0, 0.0, 16.0, 16.0),
                score: 1.0,
            }]
        })
        .collect();
    let mut rng = Rng::new(4);
    (0..10_000).all(|_| select_drop_roi(&rois, &[0.0, 0.0, 0.0], &mut rng, true).is_none())
}

/// A one-level pyramid with no gates reduces to a classifier on its tap's
/// lateral projection.
pub fn single_level_pyramid_degenerates() -> Result<bool> {
    let mut rng = Rng::new(5);
    let mut store = ParamStore::<f32>::new();
    let config = AttentionConfig {
        fpn_channels: 8,
        ..AttentionConfig::plain()
    };
    let pyramid = Pyramid::new(&config, true, &[6], 3, &mut store, &mut rng)?;
    let tape = Tape::new();
    let tap = tape.constant(random(Shape::new(2, 6, 4, 4), &mut rng));
    let levels = pyramid.forward(&tape, &[tap], &[8])?;
    let lateral = pyramid.build_fpn(&tape, &[tap])?[0];
    let direct = pyramid.classifier(0).expect("one level").forward(&tape, lateral)?;
    Ok(levels.len() == 1 && levels[0].weighted == levels[0].feature && *tape.value(levels[0].logits) == *tape.value(direct))
}

pub fn eval_forward_is_deterministic() -> Result<bool> {
    let model = Model::<f32>::new(toy_config(), 6)?;
    let images = Tensor::from_fn(Shape::new(3, 3, 32, 32), |[n, c, y, x]| ((n * 7 + c * 5 + y * 3 + x) % 11) as f32 / 10.0);
    let before: Vec<Tensor<f32>> = model.store().params().iter().map(|p| p.value().clone()).collect();
    let run = |seed| -> Result<_> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = model.forward(&tape, x, Mode::Eval, &mut Rng::new(seed))?;
        Ok((out.predictions(&tape), out.plans, out.rois))
    };
    let (a, b) = (run(0)?, run(12345)?);
    let after: Vec<Tensor<f32>> = model.store().params().iter().map(|p| p.value().clone()).collect();
    Ok(a == b && before == after)
}
