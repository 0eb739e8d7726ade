//! The `lesionforge` command line: one subcommand per pipeline stage.
//!
//! Every subcommand accepts `--config <file>`, a flat `key = value` overlay
//! that explicit flags override. Seeds fall back to `LESIONFORGE_SEED`.
//! Exit codes: 0 success, 1 operational failure, 2 usage error.

use crate::bridge::{export_overlay, segment_and_blend, BlendMode, BridgeConfig, MaskMode};
use crate::data::{
    load_dataset, read_png, rebalance, resize_bilinear, resize_normalize, stratified_sample,
    stratified_split, synth_generate, write_dataset, ImageSample, Layout, SplitSpec,
};
use crate::effnet::{EffNet, EffNetConfig};
use crate::error::Error;
use crate::nn::Network;
use crate::train::{
    evaluate_classifier, evaluate_segmentation, fine_tune, load_network, save_checkpoint,
    train_classification, train_segmentation, FineTuneConfig, History, TrainConfig,
    FINE_TUNE_PRESET_N,
};
use crate::unet::{UNet, UNetConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Failed(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "lesionforge",
    version,
    about = "Segmentation-guided melanoma classification"
)]
struct Cli {
    /// Flat `key = value` file; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with masks and labels.
    Synth(SynthArgs),
    /// Train the U-Net on a masked dataset.
    TrainSeg(TrainSegArgs),
    /// Train the EfficientNet classifier, with the bridge when a U-Net is given.
    TrainCls(TrainClsArgs),
    /// Score a classifier and write report.json and roc.csv.
    Eval(EvalArgs),
    /// Write an original | mask | blend triptych for one image.
    BridgePreview(PreviewArgs),
    /// Fine-tune a copy of a classifier on a small stratified sample.
    Finetune(FinetuneArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    fn parse(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, serde::Deserialize)]
enum SplitPreset {
    #[value(name = "70-15-15")]
    #[serde(rename = "70-15-15")]
    TrainValTest,
    #[value(name = "80-20")]
    #[serde(rename = "80-20")]
    TrainVal,
}

impl SplitPreset {
    fn spec(self, seed: u64, stratify: bool) -> SplitSpec {
        let spec = match self {
            SplitPreset::TrainValTest => SplitSpec::train_val_test(seed),
            SplitPreset::TrainVal => SplitSpec::train_val(seed),
        };
        SplitSpec {
            stratify_by_label: stratify,
            ..spec
        }
    }

    /// Subset scored by default: the one never used for model selection.
    fn holdout(self) -> Subset {
        match self {
            SplitPreset::TrainValTest => Subset::Test,
            SplitPreset::TrainVal => Subset::Val,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DataLayout {
    Hybrid,
    Ham,
    Isic,
}

impl From<DataLayout> for Layout {
    fn from(l: DataLayout) -> Self {
        match l {
            DataLayout::Hybrid => Layout::Hybrid,
            DataLayout::Ham => Layout::Ham,
            DataLayout::Isic => Layout::Isic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Subset {
    Train,
    Val,
    Test,
    All,
}

impl Subset {
    fn name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
            Subset::All => "all",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MaskArg {
    Soft,
    Binarized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BlendArg {
    Additive,
    Composite,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Number of samples (even; half per class).
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "LESIONFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = DataLayout::Hybrid)]
    layout: DataLayout,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, env = "LESIONFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SplitPreset::TrainValTest)]
    split: SplitPreset,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    /// Square input side the images are resized to.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct BridgeArgs {
    #[arg(long, default_value_t = 0.5)]
    bridge_alpha: f32,
    #[arg(long, value_enum, default_value_t = MaskArg::Binarized)]
    mask_mode: MaskArg,
    /// Mask level counted as lesion when binarizing.
    #[arg(long, default_value_t = 0.5)]
    mask_threshold: f32,
    #[arg(long, value_enum, default_value_t = BlendArg::Additive)]
    blend: BlendArg,
}

impl BridgeArgs {
    fn resolve(&self) -> CliResult<BridgeConfig> {
        let cfg = BridgeConfig {
            alpha: self.bridge_alpha,
            mask_mode: match self.mask_mode {
                MaskArg::Soft => MaskMode::Soft,
                MaskArg::Binarized => MaskMode::Binarized,
            },
            threshold: self.mask_threshold,
            blend: match self.blend {
                BlendArg::Additive => BlendMode::Additive,
                BlendArg::Composite => BlendMode::Composite,
            },
            ..Default::default()
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainSegArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base_channels: Option<usize>,
    /// Checkpoint path; the history CSV is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainClsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
    /// Segmentation checkpoint; turns the bridge on.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seg_ckpt: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    bridge: BridgeArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    l2: Option<f64>,
    /// Rebalance the training subset to this many samples per class.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rebalance: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    cls_ckpt: PathBuf,
    /// Required when the classifier was trained with the bridge on.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seg_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Subset to score; defaults to the held-out subset of the training split.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    subset: Option<Subset>,
    /// Split preset; defaults to the one recorded in the classifier checkpoint.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<SplitPreset>,
    /// Split seed; defaults to the one recorded in the classifier checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    report_out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PreviewArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    seg_ckpt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,
    #[arg(long, value_enum, default_value_t = MaskArg::Binarized)]
    mask_mode: MaskArg,
    #[arg(long, default_value_t = 0.5)]
    mask_threshold: f32,
    #[arg(long, value_enum, default_value_t = BlendArg::Additive)]
    blend: BlendArg,
    /// Resize the image to this square side first.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FinetuneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    cls_ckpt: PathBuf,
    /// Required when the classifier was trained with the bridge on.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seg_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = FINE_TUNE_PRESET_N)]
    n: usize,
    #[arg(long, env = "LESIONFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = FineTuneConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = FineTuneConfig::default().lr_scale)]
    lr_scale: f64,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the subcommand and maps the
/// outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match overlay_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 2) as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Appends `--key value` for every config-file entry whose flag is not
/// already on the command line.
fn overlay_config(mut args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let text: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let path = text.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            Some(text.get(i + 1).cloned())
        } else {
            a.strip_prefix("--config=").map(|p| Some(p.to_string()))
        }
    });
    let Some(path) = path else { return Ok(args) };
    let path = path.ok_or_else(|| CliError::Usage("--config needs a file path".into()))?;
    let body = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
    let present: BTreeSet<&str> = text
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a))
        .collect();
    let mut seen = BTreeSet::new();
    let mut extra = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{path}:{}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        if key == "config" {
            return Err(CliError::Usage(format!(
                "{path}:{}: config files cannot nest",
                lineno + 1
            )));
        }
        if !seen.insert(key.clone()) {
            return Err(CliError::Usage(format!(
                "{path}:{}: `{key}` set twice",
                lineno + 1
            )));
        }
        if !present.contains(key.as_str()) {
            extra.push(OsString::from(format!("--{key}")));
            extra.push(OsString::from(value));
        }
    }
    args.extend(extra);
    Ok(args)
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainSeg(a) => cmd_train_seg(a),
        Command::TrainCls(a) => cmd_train_cls(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BridgePreview(a) => cmd_bridge_preview(a),
        Command::Finetune(a) => cmd_finetune(a),
    }
}

/// Prints the resolved settings as a replayable `key = value` config.
fn print_config(command: &str, args: &impl Serialize) {
    println!("# lesionforge {command}");
    if let Ok(Value::Object(map)) = serde_json::to_value(args) {
        for (k, v) in map {
            match v {
                Value::String(s) => println!("{k} = {s}"),
                Value::Null => {}
                other => println!("{k} = {other}"),
            }
        }
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn load_samples(data: &DataArgs, size: Option<usize>) -> CliResult<Vec<ImageSample>> {
    if !data.data.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory {} does not exist",
            data.data.display()
        )));
    }
    let samples = load_dataset(&data.data, data.layout.into())?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{} contains no images", data.data.display())).into());
    }
    match size {
        Some(size) => Ok(samples
            .iter()
            .map(|s| resize_normalize(s, size))
            .collect::<Result<_, _>>()?),
        None => Ok(samples),
    }
}

fn split_samples(
    samples: Vec<ImageSample>,
    preset: SplitPreset,
    seed: u64,
) -> CliResult<crate::data::Split<ImageSample>> {
    let stratify = samples.iter().all(|s| s.label.is_some());
    Ok(stratified_split(samples, &preset.spec(seed, stratify))?)
}

fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("history.csv")
}

fn checkpoint_meta(history: &History, seed: u64, extra: Value) -> Value {
    let mut meta = json!({
        "epoch": history.best_epoch.unwrap_or(history.records.len()),
        "seed": seed,
        "history": history.records,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    meta
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    print_config("synth", &a);
    let samples = synth_generate(a.n, a.size, a.seed).map_err(usage)?;
    write_dataset(&a.out, &samples)?;
    let ones = samples.iter().filter(|s| s.label == Some(1)).count();
    println!("class 0: {}", samples.len() - ones);
    println!("class 1: {ones}");
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

struct SegPreset {
    size: usize,
    base_channels: usize,
    cfg: TrainConfig,
}

fn seg_preset(p: Preset) -> SegPreset {
    let paper = TrainConfig::segmentation();
    match p {
        Preset::Paper => SegPreset {
            size: 256,
            base_channels: UNetConfig::paper().base_channels,
            cfg: paper,
        },
        Preset::Desk => SegPreset {
            size: 64,
            base_channels: 8,
            cfg: TrainConfig {
                batch_size: 4,
                epochs: 20,
                ..paper
            },
        },
    }
}

fn resolve_train(t: &mut TrainArgs, base: &TrainConfig, size: usize) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        lr: *t.lr.get_or_insert(base.lr),
        batch_size: *t.batch_size.get_or_insert(base.batch_size),
        epochs: *t.epochs.get_or_insert(base.epochs),
        seed: t.seed,
        ..base.clone()
    };
    t.size.get_or_insert(size);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn cmd_train_seg(mut a: TrainSegArgs) -> CliResult<()> {
    let preset = seg_preset(a.train.preset);
    let cfg = resolve_train(&mut a.train, &preset.cfg, preset.size)?;
    let net_cfg = UNetConfig::with_base(*a.base_channels.get_or_insert(preset.base_channels));
    net_cfg.validate().map_err(usage)?;
    print_config("train-seg", &a);
    let size = a.train.size.expect("resolved");
    if !size.is_multiple_of(net_cfg.divisor()) {
        return Err(CliError::Usage(format!(
            "--size {size} must be a multiple of {}",
            net_cfg.divisor()
        )));
    }
    let samples = load_samples(&a.data, Some(size))?;
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| s.mask.is_none())
        .map(|s| s.id.as_str())
        .collect();
    if let Some(first) = missing.first() {
        return Err(Error::Dataset(format!(
            "{} of {} samples have no mask (first: `{first}`); segmentation training needs a mask for every image",
            missing.len(),
            samples.len()
        ))
        .into());
    }
    let mut split = split_samples(samples, a.train.split, a.train.seed)?;
    let train = split.take("train").expect("preset has train");
    let val = split.take("val").expect("preset has val");
    let mut net = UNet::build(&net_cfg, a.train.seed)?;
    let mut history = train_segmentation(&mut net, &train, &val, &cfg)?;
    history
        .meta
        .insert("preset".into(), a.train.preset.name().into());
    for r in &history.records {
        log::info!(
            "epoch {} loss {:.5} val dice {:?}",
            r.epoch,
            r.train_loss,
            r.val_metric
        );
    }
    let holdout = a.train.split.holdout().name();
    let scored = split
        .get(holdout)
        .filter(|s| !s.is_empty())
        .map(|s| (holdout, s))
        .unwrap_or(("val", &val));
    let eval = evaluate_segmentation(&net, scored.1)?;
    let extra = json!({ "preset": a.train.preset.name(), "split": a.train.split, "size": size });
    save_checkpoint(&net, checkpoint_meta(&history, a.train.seed, extra), &a.out)?;
    history.write(&history_path(&a.out))?;
    println!(
        "{} pixel accuracy {:.4} dice {:.4} iou {:.4}",
        scored.0, eval.scores.pixel_accuracy, eval.scores.dice, eval.scores.iou
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cls_preset(p: Preset) -> (EffNetConfig, TrainConfig) {
    let paper = TrainConfig::classification();
    match p {
        Preset::Paper => (EffNetConfig::b0(), paper),
        Preset::Desk => (
            EffNetConfig::desk(64),
            TrainConfig {
                batch_size: 8,
                epochs: 15,
                ..paper
            },
        ),
    }
}

fn cmd_train_cls(mut a: TrainClsArgs) -> CliResult<()> {
    let bridge = a.bridge.resolve()?;
    let (mut net_cfg, base) = cls_preset(a.train.preset);
    let mut cfg = resolve_train(&mut a.train, &base, net_cfg.resolution())?;
    cfg.l2_lambda = *a.l2.get_or_insert(base.l2_lambda);
    cfg.validate().map_err(usage)?;
    let size = a.train.size.expect("resolved");
    net_cfg.base_resolution = size;
    net_cfg.validate().map_err(usage)?;
    print_config("train-cls", &a);
    let seg = match &a.seg_ckpt {
        Some(p) => {
            require_file(p, "segmentation checkpoint")?;
            Some(load_network::<UNet>(p)?.0)
        }
        None => None,
    };
    if let Some(seg) = &seg {
        if !size.is_multiple_of(seg.config().divisor()) {
            return Err(CliError::Usage(format!(
                "--size {size} must be a multiple of {} for the U-Net",
                seg.config().divisor()
            )));
        }
    }
    let samples = load_samples(&a.data, Some(size))?;
    let mut split = split_samples(samples, a.train.split, a.train.seed)?;
    let mut train = split.take("train").expect("preset has train");
    let val = split.take("val").expect("preset has val");
    if let Some(target) = a.rebalance {
        train = rebalance(train, target, a.train.seed)?;
    }
    let mut net = EffNet::build(&net_cfg, a.train.seed)?;
    let history = train_classification(&mut net, seg.as_ref(), &train, &val, &cfg, &bridge)?;
    for r in &history.records {
        log::info!(
            "epoch {} loss {:.5} val accuracy {:?}",
            r.epoch,
            r.train_loss,
            r.val_metric
        );
    }
    let mut extra =
        json!({ "preset": a.train.preset.name(), "split": a.train.split, "size": size });
    extra["bridge"] = history.meta["bridge"].clone();
    if seg.is_some() {
        extra["bridge_config"] = serde_json::to_value(&bridge).expect("bridge config serializes");
    }
    save_checkpoint(&net, checkpoint_meta(&history, a.train.seed, extra), &a.out)?;
    history.write(&history_path(&a.out))?;
    println!(
        "bridge: {}",
        history.meta["bridge"].as_str().unwrap_or("off")
    );
    if let Some(r) = history.best_epoch.and_then(|e| history.records.get(e - 1)) {
        println!(
            "best epoch {} val accuracy {:.4}",
            r.epoch,
            r.val_metric.unwrap_or(f64::NAN)
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Loads a classifier together with the segmentation model and bridge
/// settings it was trained with.
fn load_classifier(
    cls_ckpt: &Path,
    seg_ckpt: Option<&Path>,
) -> CliResult<(EffNet, Value, Option<UNet>, BridgeConfig)> {
    require_file(cls_ckpt, "classifier checkpoint")?;
    if let Some(p) = seg_ckpt {
        require_file(p, "segmentation checkpoint")?;
    }
    let (cls, meta) = load_network::<EffNet>(cls_ckpt)?;
    let trained_bridge: Option<BridgeConfig> = meta
        .get("bridge_config")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()
        .map_err(|e| {
            Error::CorruptCheckpoint(format!(
                "unreadable bridge config in {}: {e}",
                cls_ckpt.display()
            ))
        })?;
    match (seg_ckpt, trained_bridge) {
        (Some(p), Some(bridge)) => Ok((cls, meta, Some(load_network::<UNet>(p)?.0), bridge)),
        (None, None) => Ok((cls, meta, None, BridgeConfig::default())),
        (None, Some(_)) => Err(CliError::Usage(
            "the classifier was trained with the bridge on; pass --seg-ckpt".into(),
        )),
        (Some(_), None) => Err(CliError::Usage(
            "the classifier was trained with the bridge off; drop --seg-ckpt".into(),
        )),
    }
}

fn cmd_eval(mut a: EvalArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CliError::Usage(format!(
            "--threshold {} outside [0, 1]",
            a.threshold
        )));
    }
    let (cls, meta, seg, bridge) = load_classifier(&a.cls_ckpt, a.seg_ckpt.as_deref())?;
    let recorded_split: Option<SplitPreset> = meta
        .get("split")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let split = *a
        .split
        .get_or_insert(recorded_split.unwrap_or(SplitPreset::TrainValTest));
    let seed = *a
        .seed
        .get_or_insert(meta.get("seed").and_then(Value::as_u64).unwrap_or(0));
    let subset = *a.subset.get_or_insert(split.holdout());
    print_config("eval", &a);
    let samples = load_samples(&a.data, Some(cls.config().resolution()))?;
    let samples = match subset {
        Subset::All => samples,
        s => split_samples(samples, split, seed)?
            .take(s.name())
            .ok_or_else(|| {
                CliError::Usage(format!("split {split:?} has no `{}` subset", s.name()))
            })?,
    };
    let report = evaluate_classifier(
        &cls,
        seg.as_ref(),
        &bridge,
        &samples,
        a.threshold,
        subset.name(),
    )?;
    report.write(&a.report_out)?;
    let m = &report.metrics;
    println!("subset {} samples {}", report.split, report.samples);
    println!("accuracy {:.4}", m.accuracy);
    println!("precision {:.4}", m.precision);
    println!("recall {:.4}", m.recall);
    println!("f1 {:.4}", m.f1);
    match report.auc {
        Some(auc) => println!("auc {auc:.4}"),
        None => println!("auc omitted (single class)"),
    }
    println!("wrote {}", a.report_out.display());
    Ok(())
}

fn cmd_bridge_preview(a: PreviewArgs) -> CliResult<()> {
    let bridge = BridgeArgs {
        bridge_alpha: a.alpha,
        mask_mode: a.mask_mode,
        mask_threshold: a.mask_threshold,
        blend: a.blend,
    }
    .resolve()?;
    print_config("bridge-preview", &a);
    require_file(&a.image, "image")?;
    require_file(&a.seg_ckpt, "segmentation checkpoint")?;
    let (seg, _) = load_network::<UNet>(&a.seg_ckpt)?;
    let mut image = read_png(&a.image, 3)?;
    if let Some(size) = a.size {
        image = resize_bilinear(&image, size, size).map_err(usage)?;
    }
    let d = seg.config().divisor();
    if image.height % d != 0 || image.width % d != 0 {
        return Err(CliError::Usage(format!(
            "image is {}x{}; sides must be multiples of {d} (use --size)",
            image.height, image.width
        )));
    }
    let b = segment_and_blend(&seg, &[&image], &bridge)?
        .pop()
        .expect("one image in, one out");
    export_overlay(&image, &b.soft_mask, &b.blended, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_finetune(mut a: FinetuneArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    if a.out == a.cls_ckpt {
        return Err(CliError::Usage(
            "--out must differ from --cls-ckpt; fine-tuning never overwrites its input".into(),
        ));
    }
    let (cls, meta, seg, bridge) = load_classifier(&a.cls_ckpt, a.seg_ckpt.as_deref())?;
    let preset = meta
        .get("preset")
        .and_then(Value::as_str)
        .and_then(Preset::parse)
        .unwrap_or(Preset::Desk);
    let (_, preset_cfg) = cls_preset(preset);
    let base = TrainConfig {
        seed: a.seed,
        batch_size: *a.batch_size.get_or_insert(preset_cfg.batch_size),
        ..preset_cfg
    };
    base.validate().map_err(usage)?;
    let ft = FineTuneConfig {
        epochs: a.epochs,
        lr_scale: a.lr_scale,
    };
    if !(ft.lr_scale.is_finite() && ft.lr_scale >= 0.0) {
        return Err(CliError::Usage(format!(
            "--lr-scale {} must be >= 0",
            ft.lr_scale
        )));
    }
    print_config("finetune", &a);
    let samples = load_samples(&a.data, Some(cls.config().resolution()))?;
    let (small, rest) = stratified_sample(samples, a.n, a.seed)?;
    let (tuned, history) = fine_tune(&cls, seg.as_ref(), &small, &rest, &base, &ft, &bridge)?;
    let mut extra = json!({ "preset": preset.name(), "fine_tune_n": small.len(), "fine_tune_preset_n": FINE_TUNE_PRESET_N });
    for key in ["split", "size", "bridge", "bridge_config"] {
        if let Some(v) = meta.get(key) {
            extra[key] = v.clone();
        }
    }
    save_checkpoint(&tuned, checkpoint_meta(&history, a.seed, extra), &a.out)?;
    history.write(&history_path(&a.out))?;
    println!(
        "fine-tuned on {} samples ({} held out)",
        small.len(),
        rest.len()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}
