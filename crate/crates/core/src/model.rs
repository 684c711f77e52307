//! Two-stage model: raw pass, ROI-guided refinement, refined pass on the
//! same parameters, summed loss and averaged prediction.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, Start};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::pyramid::{AttentionConfig, LevelOutput, Pyramid};
use crate::refine::{self, PlanOptions, RefinementPlan, RefinementPosition};
use crate::rng::Rng;
use crate::roi::{build_roi_pyramid, LevelMask, Roi, RoiConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub roi: RoiConfig,
    pub drop_probs: Vec<f64>,
    pub refinement_position: RefinementPosition,
    pub num_classes: usize,
    pub two_stage: bool,
    /// Feature pyramid with per-level heads; off gives the plain baseline.
    pub use_fpn: bool,
    /// ROI-guided zoom-in; off keeps the full extent of the refined feature.
    pub use_zoom: bool,
    pub random_drop: bool,
    pub random_zoom: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let roi = RoiConfig::for_input(backbone.input_size);
        ModelConfig {
            backbone,
            attention: AttentionConfig::default(),
            roi,
            drop_probs: vec![0.3, 0.3, 0.0],
            refinement_position: RefinementPosition::Tap0,
            num_classes: 8,
            two_stage: true,
            use_fpn: true,
            use_zoom: true,
            random_drop: false,
            random_zoom: false,
        }
    }
}

impl ModelConfig {
    pub fn num_levels(&self) -> usize {
        if self.use_fpn {
            self.backbone.tap_indices.len()
        } else {
            1
        }
    }

    /// Whether forward passes produce ROIs (needs spatial attention).
    pub fn has_rois(&self) -> bool {
        self.use_fpn && self.attention.use_spatial
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !self.use_fpn && (self.attention.use_spatial || self.attention.use_channel) {
            return Err(Error::Config("attention needs the feature pyramid".into()));
        }
        if self.has_rois() {
            self.roi.validate(self.num_levels(), self.backbone.input_size)?;
        }
        if self.two_stage {
            if !self.has_rois() {
                return Err(Error::Config("two-stage refinement needs spatial attention for its ROIs".into()));
            }
            if self.drop_probs.len() != self.num_levels() {
                return Err(Error::Config(format!(
                    "{} drop probabilities for {} levels",
                    self.drop_probs.len(),
                    self.num_levels()
                )));
            }
            refine::validate_drop_probs(&self.drop_probs)?;
            let tap0 = self.backbone.tap_indices[0];
            if let RefinementPosition::Block(i) = self.refinement_position {
                if i > tap0 {
                    return Err(Error::Config(format!(
                        "refinement at block {i} lies above the lowest tap (block {tap0})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn start(&self) -> Start {
        match self.refinement_position {
            RefinementPosition::Input => Start::Image,
            RefinementPosition::Stem => Start::AfterStem,
            RefinementPosition::Block(i) => Start::AfterBlock(i),
            RefinementPosition::Tap0 => Start::AfterBlock(self.backbone.tap_indices[0]),
        }
    }

    fn refinement_stride(&self) -> usize {
        match self.start() {
            Start::Image => 1,
            Start::AfterStem => 2,
            Start::AfterBlock(i) => self.backbone.block_strides()[i],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything one forward pass produced, for a whole batch.
pub struct ForwardOutput {
    pub raw: Vec<LevelOutput>,
    pub refined: Option<Vec<LevelOutput>>,
    /// Refined-stage input `Z_n`.
    pub refined_input: Option<Var>,
    /// Per image, per level.
    pub rois: Vec<Vec<Vec<Roi>>>,
    pub plans: Vec<RefinementPlan>,
}

impl ForwardOutput {
    /// Logit vars of every head: raw levels, then refined levels.
    pub fn heads(&self) -> Vec<Var> {
        self.raw
            .iter()
            .chain(self.refined.iter().flatten())
            .map(|l| l.logits)
            .collect()
    }

    pub fn predictions<T: Float>(&self, tape: &Tape<T>) -> Vec<Prediction> {
        let values = |levels: &[LevelOutput]| -> Vec<Vec<f32>> {
            levels
                .iter()
                .map(|l| tape.value(l.logits).data().iter().map(|v| v.to_f64() as f32).collect())
                .collect()
        };
        let raw = values(&self.raw);
        let refined = self.refined.as_deref().map(values);
        let n = tape.shape(self.raw[0].logits).n();
        let k = tape.shape(self.raw[0].logits).item_len();
        (0..n)
            .map(|i| {
                let item = |heads: &[Vec<f32>]| -> Vec<Vec<f32>> {
                    heads.iter().map(|h| h[i * k..(i + 1) * k].to_vec()).collect()
                };
                Prediction::new(item(&raw), refined.as_deref().map(item))
            })
            .collect()
    }
}

/// Per-image classifier outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub per_level_logits_raw: Vec<Vec<f32>>,
    pub per_level_logits_refined: Option<Vec<Vec<f32>>>,
    pub final_probs: Vec<f32>,
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Prediction {
    pub fn new(raw: Vec<Vec<f32>>, refined: Option<Vec<Vec<f32>>>) -> Self {
        let heads: Vec<&Vec<f32>> = raw.iter().chain(refined.iter().flatten()).collect();
        let k = heads.first().map_or(0, |h| h.len());
        let mut sum = vec![0.0f64; k];
        for h in &heads {
            for (s, p) in sum.iter_mut().zip(softmax(h)) {
                *s += p as f64;
            }
        }
        let final_probs = sum.iter().map(|s| (s / heads.len() as f64) as f32).collect();
        Prediction {
            per_level_logits_raw: raw,
            per_level_logits_refined: refined,
            final_probs,
        }
    }

    pub fn class(&self) -> usize {
        argmax(&self.final_probs)
    }
}

pub struct Model<T: Float = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone<T>,
    pyramid: Pyramid<T>,
}

impl<T: Float> Model<T> {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, &mut store, &mut rng)?;
        let pyramid = Pyramid::new(
            &config.attention,
            config.use_fpn,
            &config.backbone.tap_channels(),
            config.num_classes,
            &mut store,
            &mut rng,
        )?;
        Ok(Model {
            config,
            store,
            backbone,
            pyramid,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn pyramid(&self) -> &Pyramid<T> {
        &self.pyramid
    }

    fn raw_stage(&self, tape: &Tape<T>, images: Var) -> Result<(BackboneOutput, Vec<LevelOutput>)> {
        let bb = self.backbone.forward(tape, images)?;
        let levels = self.pyramid.forward(tape, &bb.taps, &self.config.backbone.tap_strides())?;
        Ok((bb, levels))
    }

    fn rois(&self, tape: &Tape<T>, levels: &[LevelOutput], batch: usize) -> Result<Vec<Vec<Vec<Roi>>>> {
        if !self.config.has_rois() {
            return Ok(vec![Vec::new(); batch]);
        }
        let masks: Vec<(Vec<f32>, usize, usize, usize)> = levels
            .iter()
            .map(|l| {
                let s = l.spatial.expect("spatial attention present");
                let sh = tape.shape(s);
                let v = tape.value(s).data().iter().map(|x| x.to_f64() as f32).collect();
                (v, sh.h(), sh.w(), l.stride)
            })
            .collect();
        (0..batch)
            .map(|i| {
                let per_level: Vec<LevelMask<'_>> = masks
                    .iter()
                    .map(|(v, h, w, stride)| LevelMask {
                        values: &v[i * h * w..(i + 1) * h * w],
                        h: *h,
                        w: *w,
                        stride: *stride,
                    })
                    .collect();
                build_roi_pyramid(&per_level, &self.config.roi, self.config.backbone.input_size)
            })
            .collect()
    }

    fn refined_stage(
        &self,
        tape: &Tape<T>,
        images: Var,
        bb: &BackboneOutput,
        plans: &[RefinementPlan],
    ) -> Result<(Var, Vec<LevelOutput>)> {
        let start = self.config.start();
        let feature = match start {
            Start::Image => images,
            Start::AfterStem => bb.stem.expect("full pass has a stem output"),
            Start::AfterBlock(i) => bb.blocks[i].expect("full pass has every block"),
        };
        let z = refine::refine(tape, feature, plans, self.config.refinement_stride())?;
        let tail = self.backbone.run(tape, z, start)?;
        let levels = self.pyramid.forward(tape, &tail.taps, &self.config.backbone.tap_strides())?;
        Ok((z, levels))
    }

    /// Full forward pass. Training mode may drop an ROI; both modes zoom.
    pub fn forward(&self, tape: &Tape<T>, images: Var, mode: Mode, rng: &mut Rng) -> Result<ForwardOutput> {
        let batch = tape.shape(images).n();
        let (bb, raw) = self.raw_stage(tape, images)?;
        let rois = self.rois(tape, &raw, batch)?;
        if !self.config.two_stage {
            return Ok(ForwardOutput {
                raw,
                refined: None,
                refined_input: None,
                rois,
                plans: Vec::new(),
            });
        }
        let options = PlanOptions {
            training: mode == Mode::Train,
            random_drop: self.config.random_drop,
            random_zoom: self.config.random_zoom,
            no_zoom: !self.config.use_zoom,
        };
        let size = self.config.backbone.input_size;
        let plans: Vec<RefinementPlan> = rois
            .iter()
            .map(|r| refine::plan(r, &self.config.drop_probs, size, options, rng))
            .collect();
        let (z, refined) = self.refined_stage(tape, images, &bb, &plans)?;
        Ok(ForwardOutput {
            raw,
            refined: Some(refined),
            refined_input: Some(z),
            rois,
            plans,
        })
    }

    /// Forward pass with caller-supplied refinement plans.
    pub fn forward_with_plans(&self, tape: &Tape<T>, images: Var, plans: &[RefinementPlan]) -> Result<ForwardOutput> {
        let batch = tape.shape(images).n();
        let (bb, raw) = self.raw_stage(tape, images)?;
        let rois = self.rois(tape, &raw, batch)?;
        let (z, refined) = self.refined_stage(tape, images, &bb, plans)?;
        Ok(ForwardOutput {
            raw,
            refined: Some(refined),
            refined_input: Some(z),
            rois,
            plans: plans.to_vec(),
        })
    }

    /// Unweighted sum of per-head cross-entropy, each averaged over the batch.
    pub fn loss(&self, tape: &Tape<T>, out: &ForwardOutput, labels: &[usize]) -> Result<Var> {
        let heads = out.heads();
        let mut total = tape.softmax_xent(heads[0], labels)?;
        for &h in &heads[1..] {
            let l = tape.softmax_xent(h, labels)?;
            total = tape.broadcast_add(total, l)?;
        }
        Ok(total)
    }
}

impl Model<f32> {
    /// Same architecture and values in double precision.
    pub fn to_f64(&self) -> Result<Model<f64>> {
        let m = Model::<f64>::new(self.config.clone(), 0)?;
        m.store.copy_from(&self.store)?;
        Ok(m)
    }
}
