//! `apcnn`: train, evaluate, localize, ablate and visualize attention
//! pyramid CNNs on PPM image folders or the built-in synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apcnn_core::ablation::{run_ablation, to_tsv, Suite};
use apcnn_core::data::{gen_synthetic, load_image_folder};
use apcnn_core::overlay::{export_overlays, trace, write_trace};
use apcnn_core::roi::RoiConfig;
use apcnn_core::train::{eval_localization, evaluate, load_model, train, FINAL_DIR};
use apcnn_core::{
    Dataset, Error, Model, ModelConfig, Pathway, RefinementPosition, Result, Rng, Split, SyntheticConfig, TrainConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "apcnn", version, about = "Attention pyramid CNN for fine-grained classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus checkpoints.
    Train(TrainCmd),
    /// Classification accuracy of a checkpoint.
    Eval(EvalCmd),
    /// mIoU and recall of the merged ROI rectangle against GT boxes.
    Localize(EvalCmd),
    /// Train a grid of configurations and write a TSV table.
    Ablate(AblateCmd),
    /// Draw level-coloured ROIs on images and export forward traces.
    Overlay(OverlayCmd),
    /// Write the synthetic dataset as PPM class folders.
    GenData(GenDataCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum PathwayArg {
    None,
    ChannelBottomUp,
    SpatialBottomUp,
}

impl From<PathwayArg> for Pathway {
    fn from(p: PathwayArg) -> Self {
        match p {
            PathwayArg::None => Pathway::None,
            PathwayArg::ChannelBottomUp => Pathway::ChannelBottomUp,
            PathwayArg::SpatialBottomUp => Pathway::SpatialBottomUp,
        }
    }
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Base model configuration (JSON); flags below override its fields.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    stem_channels: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    residual: Option<bool>,
    /// Pyramid width `d`.
    #[arg(long)]
    fpn_channels: Option<usize>,
    /// Channel-gate reduction ratio.
    #[arg(long)]
    reduction: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    use_spatial: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    use_channel: Option<bool>,
    #[arg(long, value_enum)]
    pathway: Option<PathwayArg>,
    /// Anchor side per level in input pixels, comma separated.
    #[arg(long, value_delimiter = ',')]
    anchor_scales: Option<Vec<f32>>,
    /// ROIs kept per level, comma separated.
    #[arg(long, value_delimiter = ',')]
    xi: Option<Vec<usize>>,
    #[arg(long)]
    nms_iou: Option<f32>,
    /// Per-level drop probabilities, comma separated.
    #[arg(long, value_delimiter = ',')]
    drop_probs: Option<Vec<f64>>,
    /// input, stem, block<N> or tap0.
    #[arg(long)]
    refinement_position: Option<RefinementPosition>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    two_stage: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    use_fpn: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    use_zoom: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    random_drop: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    random_zoom: Option<bool>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl ModelArgs {
    fn build(&self) -> Result<ModelConfig> {
        let mut c: ModelConfig = match &self.model_config {
            Some(path) => read_json(path)?,
            None => ModelConfig::default(),
        };
        if let Some(size) = self.input_size {
            c.backbone.input_size = size;
            c.roi.anchor_scales = RoiConfig::for_input(size).anchor_scales;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v.into(); })*
            };
        }
        set! {
            stem_channels => c.backbone.stem_channels,
            residual => c.backbone.residual,
            fpn_channels => c.attention.fpn_channels,
            reduction => c.attention.reduction,
            use_spatial => c.attention.use_spatial,
            use_channel => c.attention.use_channel,
            pathway => c.attention.pathway,
            anchor_scales => c.roi.anchor_scales,
            xi => c.roi.xi,
            nms_iou => c.roi.nms_iou,
            drop_probs => c.drop_probs,
            refinement_position => c.refinement_position,
            num_classes => c.num_classes,
            two_stage => c.two_stage,
            use_fpn => c.use_fpn,
            use_zoom => c.use_zoom,
            random_drop => c.random_drop,
            random_zoom => c.random_zoom,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.003)]
    lr0: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, env = "APCNN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
}

impl TrainArgs {
    fn build(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Class-per-directory PPM folder; the synthetic set is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out folder in the same layout as `--data`.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Synthetic images generated per class (train plus test).
    #[arg(long, default_value_t = 100)]
    images_per_class: usize,
    /// Synthetic images per class held out for testing.
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Synthetic patch side relative to the image side.
    #[arg(long)]
    patch_fraction: Option<f32>,
    /// Class-neutral distractor patches per synthetic image.
    #[arg(long)]
    distractors: Option<usize>,
    /// Per-pixel noise amplitude of synthetic images.
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Serialize)]
struct DataSummary {
    source: String,
    train_items: usize,
    test_items: usize,
}

impl DataArgs {
    fn synthetic(&self, num_classes: usize, size: usize) -> SyntheticConfig {
        let d = SyntheticConfig::default();
        SyntheticConfig {
            num_classes,
            images_per_class: self.images_per_class,
            size,
            patch_fraction: self.patch_fraction.unwrap_or(d.patch_fraction),
            distractors: self.distractors.unwrap_or(d.distractors),
            noise: self.noise.unwrap_or(d.noise),
        }
    }

    /// Train and optional test split.
    fn load(&self, model: &ModelConfig) -> Result<(Dataset, Option<Dataset>)> {
        let size = model.backbone.input_size;
        match &self.data {
            Some(dir) => {
                let train = load_image_folder(dir, size, Split::Train)?;
                let test = self
                    .test_data
                    .as_ref()
                    .map(|d| load_image_folder(d, size, Split::Test))
                    .transpose()?;
                Ok((train, test))
            }
            None => {
                if self.test_per_class >= self.images_per_class {
                    return Err(Error::Config("test-per-class must be below images-per-class".into()));
                }
                let all = gen_synthetic(&self.synthetic(model.num_classes, size), &mut Rng::new(self.data_seed))?;
                let (train, test) = all.split_off_test(self.test_per_class);
                Ok((train, Some(test)))
            }
        }
    }

    /// The set scored by `eval`, `localize` and `overlay`.
    fn eval_set(&self, model: &ModelConfig) -> Result<Dataset> {
        let size = model.backbone.input_size;
        match (&self.test_data, &self.data) {
            (Some(dir), _) | (None, Some(dir)) => load_image_folder(dir, size, Split::Test),
            (None, None) => Ok(self.load(model)?.1.expect("synthetic data has a test split")),
        }
    }

    fn summary(&self, train: &Dataset, test: Option<&Dataset>) -> DataSummary {
        DataSummary {
            source: match &self.data {
                Some(d) => d.display().to_string(),
                None => format!("synthetic(seed={})", self.data_seed),
            },
            train_items: train.len(),
            test_items: test.map_or(0, Dataset::len),
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    /// Output directory for metrics.jsonl, config.json and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalCmd {
    /// Checkpoint directory (a run's `final` or `best`, or the run itself).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write per-image traces (ROIs, plan, per-head logits) as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    suite: Suite,
    /// Seeds to average over, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// TSV output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct OverlayCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of images to render.
    #[arg(long, default_value_t = 16)]
    limit: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GenDataCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[command(flatten)]
    data: DataArgs,
}

fn resolve_checkpoint(dir: &Path) -> PathBuf {
    if dir.join("config.json").exists() && dir.join("manifest.txt").exists() {
        dir.to_path_buf()
    } else {
        dir.join(FINAL_DIR)
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

#[derive(Serialize)]
struct RunConfig<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: DataSummary,
}

fn cmd_train(cmd: &TrainCmd) -> Result<()> {
    let model_config = cmd.model.build()?;
    let train_config = cmd.train.build();
    train_config.validate()?;
    let (train_set, test_set) = cmd.data.load(&model_config)?;
    fs::create_dir_all(&cmd.out).map_err(|e| Error::io(&cmd.out, e))?;
    let run = RunConfig {
        model: &model_config,
        train: &train_config,
        data: cmd.data.summary(&train_set, test_set.as_ref()),
    };
    let path = cmd.out.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&run)? + "\n").map_err(|e| Error::io(&path, e))?;

    let model = Model::<f32>::new(model_config, train_config.seed)?;
    let history = train(&model, &train_set, test_set.as_ref(), &train_config, Some(&cmd.out), |r| {
        if !cmd.quiet {
            let eval = r.eval_acc.map_or(String::new(), |a| format!(" eval_acc={a:.4}"));
            eprintln!(
                "epoch {:>3} lr={:.6} loss={:.4} train_acc={:.4}{eval}",
                r.epoch, r.lr, r.train_loss, r.train_acc
            );
        }
    })?;
    print_json(history.last().expect("at least one epoch"))
}

#[derive(Serialize)]
struct EvalReport {
    accuracy: f64,
    items: usize,
}

fn cmd_eval(cmd: &EvalCmd) -> Result<()> {
    let model = load_model(&resolve_checkpoint(&cmd.checkpoint))?;
    let set = cmd.data.eval_set(model.config())?;
    if let Some(path) = &cmd.trace {
        write_trace(&trace(&model, &set, cmd.batch_size)?, path)?;
    }
    let out = evaluate(&model, &set, cmd.batch_size)?;
    print_json(&EvalReport {
        accuracy: out.accuracy(&set),
        items: set.len(),
    })
}

fn cmd_localize(cmd: &EvalCmd) -> Result<()> {
    let model = load_model(&resolve_checkpoint(&cmd.checkpoint))?;
    let set = cmd.data.eval_set(model.config())?;
    print_json(&eval_localization(&model, &set, cmd.batch_size)?)
}

fn cmd_ablate(cmd: &AblateCmd) -> Result<()> {
    let base = cmd.model.build()?;
    let train_config = cmd.train.build();
    train_config.validate()?;
    let (train_set, test_set) = cmd.data.load(&base)?;
    let test_set = test_set.ok_or_else(|| Error::Config("ablation needs --test-data".into()))?;
    let results = run_ablation(cmd.suite, &base, &train_config, &train_set, &test_set, &cmd.seeds, |label, seed, acc| {
        if !cmd.quiet {
            eprintln!("{label} seed={seed} acc={acc:.4}");
        }
    })?;
    let table = to_tsv(&results);
    match &cmd.out {
        Some(path) => fs::write(path, table).map_err(|e| Error::io(path, e)),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn cmd_overlay(cmd: &OverlayCmd) -> Result<()> {
    let model = load_model(&resolve_checkpoint(&cmd.checkpoint))?;
    if !model.config().has_rois() {
        return Err(Error::Config("overlays need a model with spatial attention".into()));
    }
    let set = cmd.data.eval_set(model.config())?;
    let records = export_overlays(&model, &set, &cmd.out, cmd.limit)?;
    eprintln!("wrote {} overlays to {}", records.len(), cmd.out.display());
    Ok(())
}

fn cmd_gen_data(cmd: &GenDataCmd) -> Result<()> {
    let config = cmd.data.synthetic(cmd.num_classes, cmd.size);
    if cmd.data.test_per_class >= cmd.data.images_per_class {
        return Err(Error::Config("test-per-class must be below images-per-class".into()));
    }
    let all = gen_synthetic(&config, &mut Rng::new(cmd.data.data_seed))?;
    let (train_set, test_set) = all.split_off_test(cmd.data.test_per_class);
    train_set.write_folder(&cmd.out.join("train"))?;
    test_set.write_folder(&cmd.out.join("test"))?;
    eprintln!("wrote {} train and {} test images to {}", train_set.len(), test_set.len(), cmd.out.display());
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_data_error() {
        2
    } else if err.is_numeric_error() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Localize(c) => cmd_localize(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Overlay(c) => cmd_overlay(c),
        Command::GenData(c) => cmd_gen_data(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
