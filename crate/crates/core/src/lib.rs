//! Attention pyramid CNN for fine-grained classification, built on a small
//! deterministic reverse-mode autograd engine.

pub mod ablation;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
mod kernels;
pub mod model;
pub mod overlay;
pub mod param;
pub mod pyramid;
pub mod refine;
pub mod rng;
pub mod roi;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{cosine_lr, sgd_step, Init, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{CellRect, Tape, Var};
pub use tensor::{Float, Shape, Tensor};
pub use backbone::{BackboneConfig, BlockConfig};
pub use data::{Dataset, Split, SyntheticConfig};
pub use model::{Mode, Model, ModelConfig, Prediction};
pub use pyramid::{AttentionConfig, Pathway};
pub use refine::{RefinementPlan, RefinementPosition};
pub use roi::{Rect, Roi, RoiConfig};
pub use train::{EpochRecord, TrainConfig};
