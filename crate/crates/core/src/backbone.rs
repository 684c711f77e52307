//! Plain convolutional backbone producing the pyramid taps `B_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Init, ParamStore, Parameter};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Shape, Tensor};

/// Fixed input normalisation applied before the stem: `(x - mean) / std`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub num_convs: usize,
    pub out_channels: usize,
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of the stride-2 stem convolution.
    pub stem_channels: usize,
    pub blocks: Vec<BlockConfig>,
    /// Blocks whose outputs are emitted as pyramid taps, bottom-up.
    pub tap_indices: Vec<usize>,
    /// Adds an identity skip around every conv after the first in a block.
    pub residual: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let block = |out_channels, num_convs| BlockConfig {
            num_convs,
            out_channels,
            downsample: true,
        };
        BackboneConfig {
            input_size: 96,
            in_channels: 3,
            stem_channels: 16,
            blocks: vec![block(24, 1), block(32, 2), block(64, 2), block(64, 1)],
            tap_indices: vec![1, 2, 3],
            residual: false,
        }
    }
}

impl BackboneConfig {
    /// Cumulative stride after the stem and after each block.
    pub fn block_strides(&self) -> Vec<usize> {
        let mut stride = 2;
        self.blocks
            .iter()
            .map(|b| {
                if b.downsample {
                    stride *= 2;
                }
                stride
            })
            .collect()
    }

    pub fn tap_strides(&self) -> Vec<usize> {
        let strides = self.block_strides();
        self.tap_indices.iter().map(|&i| strides[i]).collect()
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.tap_indices
            .iter()
            .map(|&i| self.blocks[i].out_channels)
            .collect()
    }

    pub fn max_stride(&self) -> usize {
        *self.block_strides().last().unwrap_or(&2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.blocks.is_empty() || self.tap_indices.is_empty() {
            return fail("backbone needs at least one block and one tap".into());
        }
        if self.blocks.iter().any(|b| b.num_convs == 0 || b.out_channels == 0) {
            return fail("every block needs at least one conv and one channel".into());
        }
        if self.tap_indices.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "tap indices must be strictly increasing, got {:?}",
                self.tap_indices
            ));
        }
        if *self.tap_indices.last().unwrap() >= self.blocks.len() {
            return fail(format!(
                "tap index {} out of range for {} blocks",
                self.tap_indices.last().unwrap(),
                self.blocks.len()
            ));
        }
        let strides = self.tap_strides();
        if strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return fail(format!("tap strides must double level to level, got {strides:?}"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.max_stride()) {
            return fail(format!(
                "input size {} is not divisible by the backbone stride {}",
                self.input_size,
                self.max_stride()
            ));
        }
        Ok(())
    }
}

struct Conv<T: Float> {
    w: Parameter<T>,
    b: Parameter<T>,
    stride: usize,
}

impl<T: Float> Conv<T> {
    fn new(store: &mut ParamStore<T>, id: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        let fan_in = c_in * 9;
        Ok(Conv {
            w: store.create(&format!("{id}.w"), Shape::new(c_out, c_in, 3, 3), Init::He { fan_in }, rng)?,
            b: store.create(&format!("{id}.b"), Shape::vector(1, c_out), Init::Zeros, rng)?,
            stride,
        })
    }

    fn forward(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, tape.param(&self.w), tape.param(&self.b), self.stride, 1)
    }
}

/// Where a backbone pass begins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Start {
    Image,
    /// Input is a (possibly refined) stem output.
    AfterStem,
    /// Input is a (possibly refined) output of the given block.
    AfterBlock(usize),
}

/// Every intermediate a backbone pass produced.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub stem: Option<Var>,
    /// Output of each block; `None` for blocks skipped by the start point.
    pub blocks: Vec<Option<Var>>,
    /// Pyramid taps `B_n .. B_{n+N-1}`, bottom-up.
    pub taps: Vec<Var>,
}

pub struct Backbone<T: Float> {
    config: BackboneConfig,
    stem: Conv<T>,
    blocks: Vec<Vec<Conv<T>>>,
}

impl<T: Float> Backbone<T> {
    pub fn new(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv::new(store, "backbone.stem", config.in_channels, config.stem_channels, 2, rng)?;
        let mut c_in = config.stem_channels;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, b) in config.blocks.iter().enumerate() {
            let mut convs = Vec::with_capacity(b.num_convs);
            for j in 0..b.num_convs {
                let stride = if j == 0 && b.downsample { 2 } else { 1 };
                let id = format!("backbone.block{i}.conv{j}");
                convs.push(Conv::new(store, &id, c_in, b.out_channels, stride, rng)?);
                c_in = b.out_channels;
            }
            blocks.push(convs);
        }
        Ok(Backbone {
            config: config.clone(),
            stem,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Full pass from an image batch.
    pub fn forward(&self, tape: &Tape<T>, image: Var) -> Result<BackboneOutput> {
        let s = tape.shape(image);
        if s.h() != s.w() || !s.h().is_multiple_of(self.config.max_stride()) {
            return Err(Error::Config(format!(
                "input {s} must be square with a side divisible by {}",
                self.config.max_stride()
            )));
        }
        self.run(tape, image, Start::Image)
    }

    /// Pass beginning at `start`, with `x` the feature at that point.
    pub fn run(&self, tape: &Tape<T>, x: Var, start: Start) -> Result<BackboneOutput> {
        let (mut h, stem, first_block) = match start {
            Start::Image => {
                let shift = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), T::from_f64(-INPUT_MEAN / INPUT_STD)));
                let x = tape.broadcast_add(tape.scale(x, T::from_f64(1.0 / INPUT_STD))?, shift)?;
                let y = tape.relu(self.stem.forward(tape, x)?)?;
                (y, Some(y), 0)
            }
            Start::AfterStem => (x, None, 0),
            Start::AfterBlock(i) => (x, None, i + 1),
        };
        let mut outputs = vec![None; self.blocks.len()];
        if let Start::AfterBlock(i) = start {
            outputs[i] = Some(x);
        }
        for (i, convs) in self.blocks.iter().enumerate().skip(first_block) {
            for (j, conv) in convs.iter().enumerate() {
                let z = conv.forward(tape, h)?;
                h = if self.config.residual && j > 0 {
                    tape.relu(tape.broadcast_add(z, h)?)?
                } else {
                    tape.relu(z)?
                };
            }
            outputs[i] = Some(h);
        }
        let taps = self
            .config
            .tap_indices
            .iter()
            .map(|&i| {
                outputs[i].ok_or_else(|| {
                    Error::Config(format!("backbone pass from {start:?} skips tap block {i}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BackboneOutput {
            stem,
            blocks: outputs,
            taps,
        })
    }
}
