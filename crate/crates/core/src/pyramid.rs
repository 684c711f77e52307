//! Feature pyramid with spatial and channel attention.
//!
//! Top-down: `F_top = lateral(B_top)`, `F_k = lateral(B_k) + up(F_{k+1})`.
//! Each level then gets a spatial mask `A_s = sigmoid(deconv3x3(F_k))`, a
//! channel mask `A_c = sigmoid(W2 relu(W1 gap(F_k)))`, and the weighted
//! feature `F'_k = F_k * (A_s (+) A_c)` that feeds that level's classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Init, ParamStore, Parameter};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Shape};

/// Bottom-up attention pathway between neighbouring levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    None,
    #[default]
    ChannelBottomUp,
    SpatialBottomUp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub use_spatial: bool,
    pub use_channel: bool,
    pub pathway: Pathway,
    /// Channel count `d` shared by every pyramid level.
    pub fpn_channels: usize,
    /// Bottleneck ratio of the channel gate.
    pub reduction: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            use_spatial: true,
            use_channel: true,
            pathway: Pathway::ChannelBottomUp,
            fpn_channels: 128,
            reduction: 4,
        }
    }
}

impl AttentionConfig {
    /// Plain FPN: no gates, no pathway.
    pub fn plain() -> Self {
        AttentionConfig {
            use_spatial: false,
            use_channel: false,
            pathway: Pathway::None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.pathway {
            Pathway::ChannelBottomUp if !self.use_channel => {
                return Err(Error::Config("channel pathway requires the channel gate".into()))
            }
            Pathway::SpatialBottomUp if !self.use_spatial => {
                return Err(Error::Config("spatial pathway requires the spatial gate".into()))
            }
            _ => {}
        }
        if self.fpn_channels == 0 || self.reduction == 0 || !self.fpn_channels.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "fpn channels {} not divisible by reduction {}",
                self.fpn_channels, self.reduction
            )));
        }
        Ok(())
    }
}

struct Linear<T: Float> {
    w: Parameter<T>,
    b: Parameter<T>,
}

impl<T: Float> Linear<T> {
    fn new(store: &mut ParamStore<T>, id: &str, fin: usize, fout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            w: store.create(&format!("{id}.w"), Shape::new(fout, fin, 1, 1), Init::He { fan_in: fin }, rng)?,
            b: store.create(&format!("{id}.b"), Shape::vector(1, fout), Init::Zeros, rng)?,
        })
    }

    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        tape.fc(x, tape.param(&self.w), tape.param(&self.b))
    }
}

/// Channel gate: `sigmoid(W2 relu(W1 gap(F)))`.
pub struct ChannelGate<T: Float> {
    squeeze: Linear<T>,
    excite: Linear<T>,
}

impl<T: Float> ChannelGate<T> {
    fn new(store: &mut ParamStore<T>, id: &str, d: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if reduction == 0 || !d.is_multiple_of(reduction) {
            return Err(Error::Config(format!("{d} channels not divisible by reduction {reduction}")));
        }
        Ok(ChannelGate {
            squeeze: Linear::new(store, &format!("{id}.fc1"), d, d / reduction, rng)?,
            excite: Linear::new(store, &format!("{id}.fc2"), d / reduction, d, rng)?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, feature: Var) -> Result<Var> {
        let pooled = tape.gap(feature)?;
        let hidden = tape.relu(self.squeeze.forward(tape, pooled)?)?;
        tape.sigmoid(self.excite.forward(tape, hidden)?)
    }

    pub fn excite_params(&self) -> (&Parameter<T>, &Parameter<T>) {
        (&self.excite.w, &self.excite.b)
    }
}

/// Spatial gate: `sigmoid(deconv3x3(F))`, one output channel.
pub struct SpatialGate<T: Float> {
    w: Parameter<T>,
    b: Parameter<T>,
}

impl<T: Float> SpatialGate<T> {
    fn new(store: &mut ParamStore<T>, id: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SpatialGate {
            w: store.create(&format!("{id}.w"), Shape::new(d, 1, 3, 3), Init::He { fan_in: d * 9 }, rng)?,
            b: store.create(&format!("{id}.b"), Shape::vector(1, 1), Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, feature: Var) -> Result<Var> {
        let logits = tape.deconv2d(feature, tape.param(&self.w), tape.param(&self.b))?;
        tape.sigmoid(logits)
    }

    pub fn params(&self) -> (&Parameter<T>, &Parameter<T>) {
        (&self.w, &self.b)
    }
}

/// GAP followed by two FC layers with a ReLU between them.
pub struct Classifier<T: Float> {
    hidden: Linear<T>,
    out: Linear<T>,
}

impl<T: Float> Classifier<T> {
    fn new(store: &mut ParamStore<T>, id: &str, fin: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Classifier {
            hidden: Linear::new(store, &format!("{id}.fc1"), fin, hidden, rng)?,
            out: Linear::new(store, &format!("{id}.fc2"), hidden, classes, rng)?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, feature: Var) -> Result<Var> {
        let pooled = tape.gap(feature)?;
        let h = tape.relu(self.hidden.forward(tape, pooled)?)?;
        self.out.forward(tape, h)
    }

    pub fn output_params(&self) -> (&Parameter<T>, &Parameter<T>) {
        (&self.out.w, &self.out.b)
    }
}

/// Sums each raw channel mask with everything below it:
/// `out_0 = A_0`, `out_k = A_k + out_{k-1}`.
pub fn channel_pathway<T: Float>(tape: &Tape<T>, raw: &[Var]) -> Result<Vec<Var>> {
    let mut out: Vec<Var> = Vec::with_capacity(raw.len());
    for &mask in raw {
        let next = match out.last() {
            Some(&below) => tape.broadcast_add(mask, below)?,
            None => mask,
        };
        out.push(next);
    }
    Ok(out)
}

/// Spatial variant of the pathway: the accumulated lower mask is resized to
/// the current level and added.
pub fn spatial_pathway<T: Float>(tape: &Tape<T>, raw: &[Var]) -> Result<Vec<Var>> {
    let mut out: Vec<Var> = Vec::with_capacity(raw.len());
    for &mask in raw {
        let next = match out.last() {
            Some(&below) => {
                let s = tape.shape(mask);
                let down = tape.bilinear_resize(below, s.h(), s.w())?;
                tape.broadcast_add(mask, down)?
            }
            None => mask,
        };
        out.push(next);
    }
    Ok(out)
}

/// `F' = F * (A_s (+) A_c)`; a missing mask contributes zero, and with both
/// missing `F` passes through unchanged.
pub fn weight_features<T: Float>(
    tape: &Tape<T>,
    feature: Var,
    spatial: Option<Var>,
    channel: Option<Var>,
) -> Result<Var> {
    let gate = match (spatial, channel) {
        (None, None) => return Ok(feature),
        (Some(s), None) => s,
        (None, Some(c)) => c,
        (Some(s), Some(c)) => tape.broadcast_add(s, c)?,
    };
    tape.ewise_mul(feature, gate)
}

/// Everything one pyramid level produced in one stage.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub feature: Var,
    /// Spatial mask after the pathway, as used for weighting and ROIs.
    pub spatial: Option<Var>,
    /// Channel mask after the pathway.
    pub channel: Option<Var>,
    pub weighted: Var,
    pub logits: Var,
    pub stride: usize,
}

struct Level<T: Float> {
    lateral: Option<(Parameter<T>, Parameter<T>)>,
    spatial: Option<SpatialGate<T>>,
    channel: Option<ChannelGate<T>>,
    classifier: Classifier<T>,
}

/// Pyramid head. With `use_fpn == false` it degenerates to a single
/// classifier on the topmost tap (the no-pyramid baseline).
pub struct Pyramid<T: Float> {
    config: AttentionConfig,
    use_fpn: bool,
    levels: Vec<Level<T>>,
}

impl<T: Float> Pyramid<T> {
    pub fn new(
        config: &AttentionConfig,
        use_fpn: bool,
        tap_channels: &[usize],
        num_classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.fpn_channels;
        let mut levels = Vec::new();
        if !use_fpn {
            let c = *tap_channels
                .last()
                .ok_or_else(|| Error::Config("no backbone taps".into()))?;
            levels.push(Level {
                lateral: None,
                spatial: None,
                channel: None,
                classifier: Classifier::new(store, "classifier.top", c, d, num_classes, rng)?,
            });
        } else {
            for (k, &c) in tap_channels.iter().enumerate() {
                let lateral = (
                    store.create(&format!("pyramid.lateral{k}.w"), Shape::new(d, c, 1, 1), Init::He { fan_in: c }, rng)?,
                    store.create(&format!("pyramid.lateral{k}.b"), Shape::vector(1, d), Init::Zeros, rng)?,
                );
                let spatial = config
                    .use_spatial
                    .then(|| SpatialGate::new(store, &format!("pyramid.spatial{k}"), d, rng))
                    .transpose()?;
                let channel = config
                    .use_channel
                    .then(|| ChannelGate::new(store, &format!("pyramid.channel{k}"), d, config.reduction, rng))
                    .transpose()?;
                let classifier = Classifier::new(store, &format!("classifier.level{k}"), d, d, num_classes, rng)?;
                levels.push(Level {
                    lateral: Some(lateral),
                    spatial,
                    channel,
                    classifier,
                });
            }
        }
        Ok(Pyramid {
            config: config.clone(),
            use_fpn,
            levels,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn spatial_gate(&self, level: usize) -> Option<&SpatialGate<T>> {
        self.levels.get(level)?.spatial.as_ref()
    }

    pub fn channel_gate(&self, level: usize) -> Option<&ChannelGate<T>> {
        self.levels.get(level)?.channel.as_ref()
    }

    pub fn classifier(&self, level: usize) -> Option<&Classifier<T>> {
        self.levels.get(level).map(|l| &l.classifier)
    }

    /// Lateral 1x1 convs plus the top-down pathway.
    pub fn build_fpn(&self, tape: &Tape<T>, taps: &[Var]) -> Result<Vec<Var>> {
        if taps.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "{} taps for {} pyramid levels",
                taps.len(),
                self.levels.len()
            )));
        }
        let mut features = vec![None; taps.len()];
        let mut above: Option<Var> = None;
        for k in (0..taps.len()).rev() {
            let (w, b) = self.levels[k]
                .lateral
                .as_ref()
                .ok_or_else(|| Error::Config("baseline head has no lateral connections".into()))?;
            let lateral = tape.conv2d(taps[k], tape.param(w), tape.param(b), 1, 0)?;
            let f = match above {
                Some(upper) => {
                    let s = tape.shape(lateral);
                    let up = tape.bilinear_resize(upper, s.h(), s.w())?;
                    tape.broadcast_add(lateral, up)?
                }
                None => lateral,
            };
            features[k] = Some(f);
            above = Some(f);
        }
        Ok(features.into_iter().map(Option::unwrap).collect())
    }

    /// Runs the head on bottom-up taps with their strides.
    pub fn forward(&self, tape: &Tape<T>, taps: &[Var], strides: &[usize]) -> Result<Vec<LevelOutput>> {
        if !self.use_fpn {
            let top = *taps.last().ok_or_else(|| Error::Config("no taps".into()))?;
            let logits = self.levels[0].classifier.forward(tape, top)?;
            return Ok(vec![LevelOutput {
                feature: top,
                spatial: None,
                channel: None,
                weighted: top,
                logits,
                stride: *strides.last().unwrap(),
            }]);
        }
        let features = self.build_fpn(tape, taps)?;
        let spatial_raw = self
            .levels
            .iter()
            .zip(&features)
            .map(|(l, &f)| l.spatial.as_ref().map(|g| g.forward(tape, f)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let channel_raw = self
            .levels
            .iter()
            .zip(&features)
            .map(|(l, &f)| l.channel.as_ref().map(|g| g.forward(tape, f)).transpose())
            .collect::<Result<Vec<_>>>()?;

        let spatial = match self.config.pathway {
            Pathway::SpatialBottomUp => {
                let raw: Vec<Var> = spatial_raw.iter().map(|m| m.unwrap()).collect();
                spatial_pathway(tape, &raw)?.into_iter().map(Some).collect()
            }
            _ => spatial_raw,
        };
        let channel = match self.config.pathway {
            Pathway::ChannelBottomUp => {
                let raw: Vec<Var> = channel_raw.iter().map(|m| m.unwrap()).collect();
                channel_pathway(tape, &raw)?.into_iter().map(Some).collect()
            }
            _ => channel_raw,
        };

        let mut out = Vec::with_capacity(self.levels.len());
        for (k, level) in self.levels.iter().enumerate() {
            let weighted = weight_features(tape, features[k], spatial[k], channel[k])?;
            let logits = level.classifier.forward(tape, weighted)?;
            out.push(LevelOutput {
                feature: features[k],
                spatial: spatial[k],
                channel: channel[k],
                weighted,
                logits,
                stride: strides[k],
            });
        }
        Ok(out)
    }
}
