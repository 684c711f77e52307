//! Ablation grids over model flags, trained under shared seeds.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::LocalizationReport;
use crate::model::{Model, ModelConfig};
use crate::pyramid::{AttentionConfig, Pathway};
use crate::refine::RefinementPosition;
use crate::train::{eval_localization, evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Baseline, feature pyramid, attention pyramid.
    Pyramid,
    /// Spatial/channel attention and bottom-up pathway arrangements.
    Attention,
    /// Erasing and zoom-in, each ROI-guided or random.
    Refinement,
    /// Where the refinement is applied.
    Position,
    /// Pyramid rows plus the full two-stage model.
    Directional,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Pyramid, Suite::Attention, Suite::Refinement, Suite::Position, Suite::Directional];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Pyramid => "pyramid",
            Suite::Attention => "attention",
            Suite::Refinement => "refinement",
            Suite::Position => "position",
            Suite::Directional => "directional",
        })
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (pyramid, attention, refinement, position, directional)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: ModelConfig,
}

fn row(label: impl Into<String>, config: ModelConfig) -> AblationRow {
    AblationRow { label: label.into(), config }
}

fn one_stage(base: &ModelConfig, use_spatial: bool, use_channel: bool, pathway: Pathway) -> ModelConfig {
    ModelConfig {
        attention: AttentionConfig {
            use_spatial,
            use_channel,
            pathway,
            ..base.attention.clone()
        },
        two_stage: false,
        use_fpn: true,
        ..base.clone()
    }
}

fn baseline(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        use_fpn: false,
        ..one_stage(base, false, false, Pathway::None)
    }
}

/// Configurations of a suite, derived from `base` (the full model).
pub fn suite_rows(suite: Suite, base: &ModelConfig) -> Vec<AblationRow> {
    let full = ModelConfig {
        two_stage: true,
        use_fpn: true,
        ..base.clone()
    };
    let ap = one_stage(base, true, true, Pathway::ChannelBottomUp);
    match suite {
        Suite::Pyramid => vec![
            row("Baseline", baseline(base)),
            row("FP", one_stage(base, false, false, Pathway::None)),
            row("FP + AP", ap),
        ],
        Suite::Directional => {
            let mut rows = suite_rows(Suite::Pyramid, base);
            rows.push(row("FP + AP + refinement", full));
            rows
        }
        Suite::Attention => vec![
            row("FPN", one_stage(base, false, false, Pathway::None)),
            row("FPN + C", one_stage(base, false, true, Pathway::None)),
            row("FPN + S", one_stage(base, true, false, Pathway::None)),
            row("FPN + S + C", one_stage(base, true, true, Pathway::None)),
            row("FPN + C + SP", one_stage(base, true, true, Pathway::SpatialBottomUp)),
            row("FPN + S + CP", ap),
        ],
        Suite::Refinement => {
            let mut rows = Vec::new();
            for (erase, zoom) in [(false, false), (true, false), (false, true), (true, true)] {
                for random in [false, true] {
                    let drop_probs = if erase {
                        full.drop_probs.clone()
                    } else {
                        vec![0.0; full.drop_probs.len()]
                    };
                    let label = format!(
                        "erase={} zoom={} guidance={}",
                        if erase { "yes" } else { "no" },
                        if zoom { "yes" } else { "no" },
                        if random { "random" } else { "roi" }
                    );
                    rows.push(row(
                        label,
                        ModelConfig {
                            drop_probs,
                            use_zoom: zoom,
                            random_drop: random,
                            random_zoom: random,
                            ..full.clone()
                        },
                    ));
                }
            }
            rows
        }
        Suite::Position => {
            let tap0 = base.backbone.tap_indices[0];
            let mut positions = vec![(RefinementPosition::Input, "input".to_string()), (RefinementPosition::Stem, "stem".to_string())];
            positions.extend((0..tap0).map(|i| (RefinementPosition::Block(i), format!("block{i}"))));
            positions.push((RefinementPosition::Tap0, "tap0".to_string()));
            positions
                .into_iter()
                .map(|(refinement_position, label)| {
                    row(
                        label,
                        ModelConfig {
                            refinement_position,
                            ..full.clone()
                        },
                    )
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Final-epoch test accuracy per seed.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Averaged over seeds; only for rows with spatial attention.
    pub localization: Option<LocalizationReport>,
    pub seconds_per_epoch: f64,
}

/// Trains every row of `rows` once per seed and scores it on `test_set`.
/// The seed drives both initialization and training order.
pub fn run_rows(
    rows: &[AblationRow],
    train_config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, f64),
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::with_capacity(rows.len());
    for r in rows {
        let mut accuracies = Vec::with_capacity(seeds.len());
        let mut locs = Vec::new();
        let mut seconds = 0.0;
        for &seed in seeds {
            let model = Model::<f32>::new(r.config.clone(), seed)?;
            let config = TrainConfig {
                seed,
                eval_every: train_config.epochs,
                ..train_config.clone()
            };
            let start = Instant::now();
            train(&model, train_set, None, &config, None, |_| {})?;
            seconds += start.elapsed().as_secs_f64();
            let acc = evaluate(&model, test_set, config.batch_size)?.accuracy(test_set);
            if r.config.has_rois() {
                locs.push(eval_localization(&model, test_set, config.batch_size)?);
            }
            progress(&r.label, seed, acc);
            accuracies.push(acc);
        }
        let n = seeds.len().max(1) as f64;
        let localization = (!locs.is_empty()).then(|| LocalizationReport {
            miou: locs.iter().map(|l| l.miou).sum::<f64>() / locs.len() as f64,
            recall: locs.iter().map(|l| l.recall).sum::<f64>() / locs.len() as f64,
            evaluated: locs.iter().map(|l| l.evaluated).sum(),
            skipped: locs.iter().map(|l| l.skipped).sum(),
        });
        results.push(AblationResult {
            label: r.label.clone(),
            seeds: seeds.to_vec(),
            mean_accuracy: accuracies.iter().sum::<f64>() / n,
            accuracies,
            localization,
            seconds_per_epoch: seconds / (n * train_config.epochs as f64),
        });
    }
    Ok(results)
}

pub fn run_ablation(
    suite: Suite,
    base: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    seeds: &[u64],
    progress: impl FnMut(&str, u64, f64),
) -> Result<Vec<AblationResult>> {
    run_rows(&suite_rows(suite, base), train_config, train_set, test_set, seeds, progress)
}

/// Tab-separated table with a header row; accuracies in percent.
pub fn to_tsv(results: &[AblationResult]) -> String {
    let seeds = results.first().map_or(0, |r| r.seeds.len());
    let mut out = String::from("method\taccuracy");
    for i in 0..seeds {
        let _ = write!(out, "\taccuracy_seed{i}");
    }
    out.push_str("\tmiou\trecall\tseconds_per_epoch\n");
    for r in results {
        let _ = write!(out, "{}\t{:.2}", r.label, 100.0 * r.mean_accuracy);
        for a in &r.accuracies {
            let _ = write!(out, "\t{:.2}", 100.0 * a);
        }
        match &r.localization {
            Some(l) => {
                let _ = write!(out, "\t{:.2}\t{:.2}", 100.0 * l.miou, 100.0 * l.recall);
            }
            None => out.push_str("\t-\t-"),
        }
        let _ = writeln!(out, "\t{:.2}", r.seconds_per_epoch);
    }
    out
}
