//! Training loop, evaluation and checkpoint directories.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, localization_scores, LocalizationReport};
use crate::model::{Mode, Model, ModelConfig, Prediction};
use crate::param::{cosine_lr, sgd_step};
use crate::refine::merge_rois;
use crate::rng::Rng;
use crate::roi::{Rect, Roi};
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and always after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr0: 0.001,
            momentum: 0.9,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch size and eval interval must be positive".into()));
        }
        if self.lr0.is_nan() || self.lr0 <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr0 > 0 and momentum in [0, 1), got {} and {}",
                self.lr0, self.momentum
            )));
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.lr0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_acc: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_DIR: &str = "final";
pub const BEST_DIR: &str = "best";

/// Per-image results of an evaluation pass.
pub struct EvalOutput {
    pub predictions: Vec<Prediction>,
    pub rois: Vec<Vec<Vec<Roi>>>,
    /// Merged ROI rectangle per image; `None` when the model makes no ROIs.
    pub boxes: Vec<Option<Rect>>,
}

impl EvalOutput {
    pub fn accuracy(&self, dataset: &Dataset) -> f64 {
        let predicted: Vec<usize> = self.predictions.iter().map(Prediction::class).collect();
        let labels: Vec<usize> = dataset.items.iter().map(|i| i.label).collect();
        accuracy(&predicted, &labels)
    }
}

const EVAL_STREAM: u64 = 0xe7a1;

/// Eval-mode forward over a dataset, in order.
pub fn evaluate(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<EvalOutput> {
    let mut rng = Rng::new(EVAL_STREAM);
    let mut out = EvalOutput {
        predictions: Vec::with_capacity(dataset.len()),
        rois: Vec::with_capacity(dataset.len()),
        boxes: Vec::with_capacity(dataset.len()),
    };
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let size = model.config().backbone.input_size;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, _) = dataset.batch(chunk)?;
        let tape = Tape::new();
        let x = tape.constant(images);
        let fwd = model.forward(&tape, x, Mode::Eval, &mut rng)?;
        out.predictions.extend(fwd.predictions(&tape));
        for (i, rois) in fwd.rois.into_iter().enumerate() {
            let boxed = if !model.config().has_rois() {
                None
            } else if let Some(plan) = fwd.plans.get(i) {
                Some(plan.zoom_rect)
            } else {
                Some(merge_rois(&rois, size))
            };
            out.boxes.push(boxed);
            out.rois.push(rois);
        }
    }
    Ok(out)
}

/// mIoU and recall of the merged ROI rectangle against GT boxes.
pub fn eval_localization(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<LocalizationReport> {
    if !model.config().has_rois() {
        return Err(Error::Config("localization needs a model with spatial attention".into()));
    }
    let out = evaluate(model, dataset, batch_size)?;
    let pairs: Vec<(Rect, Option<Rect>)> = out
        .boxes
        .iter()
        .zip(&dataset.items)
        .map(|(b, item)| (b.expect("model produces ROIs"), item.gt))
        .collect();
    Ok(localization_scores(&pairs))
}

/// Saves parameters plus `config.json` so [`load_model`] can rebuild the model.
pub fn save_model(model: &Model<f32>, dir: &Path) -> Result<()> {
    model.store().save_checkpoint(dir)?;
    let path = dir.join("config.json");
    let json = serde_json::to_string_pretty(model.config())?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: &Path) -> Result<Model<f32>> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    let model = Model::new(config, 0)?;
    model.store().load_checkpoint(dir)?;
    Ok(model)
}

/// Trains `model` in place. With `out_dir`, writes `metrics.jsonl` plus the
/// `final` and `best` checkpoints. `on_epoch` sees each record as it lands.
pub fn train(
    model: &Model<f32>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if train_set.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            train_set.num_classes(),
            model.config().num_classes
        )));
    }
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let root = Rng::new(config.seed);
    let mut order_rng = root.fork(1);
    let mut model_rng = root.fork(2);
    let params = model.store().params();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<f64> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = train_set.batch(chunk)?;
            let tape = Tape::new();
            let x = tape.constant(images);
            let out = model.forward(&tape, x, Mode::Train, &mut model_rng)?;
            let loss = model.loss(&tape, &out, &labels)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                let (node, op) = tape.first_non_finite().unwrap_or((loss.index(), "loss"));
                return Err(Error::NonFinite { op, node });
            }
            loss_sum += value * chunk.len() as f64;
            hits += out
                .predictions(&tape)
                .iter()
                .zip(&labels)
                .filter(|(p, &l)| p.class() == l)
                .count();
            model.store().zero_grad();
            tape.backward(loss)?;
            sgd_step(params, lr, config.momentum);
        }
        let eval_acc = match eval_set {
            Some(set) if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs => {
                Some(evaluate(model, set, config.batch_size)?.accuracy(set))
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            eval_acc,
        };
        if let Some((file, path)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        if let (Some(dir), Some(acc)) = (out_dir, eval_acc) {
            if best.is_none_or(|b| acc > b) {
                best = Some(acc);
                save_model(model, &dir.join(BEST_DIR))?;
            }
        }
        on_epoch(&record);
        history.push(record);
    }
    if let Some(dir) = out_dir {
        save_model(model, &dir.join(FINAL_DIR))?;
    }
    Ok(history)
}
