//! Training loops, evaluation and checkpoints.

mod checkpoint;
mod eval;

pub use checkpoint::{
    load_checkpoint, load_network, save_checkpoint, Checkpoint, Descriptor, MAGIC, VERSION,
};
pub use eval::{
    confusion_matrix, metrics, roc_auc, seg_scores, Counts, EvalReport, Metrics, SegScores,
};

use crate::bridge::{segment_and_blend, BridgeConfig};
use crate::data::rng::{stream, stream_seed};
use crate::data::{augment, images_to_tensor, tensor_to_images, AugmentConfig, Image, ImageSample};
use crate::effnet::EffNet;
use crate::error::{Error, Result};
use crate::nn::{Mode, Network, Pass};
use crate::tensor::{AdamConfig, AdamState, Tensor};
use crate::unet::UNet;
use rand::seq::SliceRandom;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Images per inference forward pass.
const INFER_CHUNK: usize = 8;
const BCE_EPS: f64 = 1e-7;

/// Which training samples get a random geometric augmentation each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPolicy {
    Off,
    /// Only copies produced by oversampling.
    Oversampled,
    All,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_lambda: f64,
    pub shuffle: bool,
    pub seed: u64,
    /// Ranges for on-the-fly augmentation. Its `seed` is replaced by the
    /// training seed.
    pub augment: AugmentConfig,
    pub augment_policy: AugmentPolicy,
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            l2_lambda: 0.0,
            shuffle: true,
            seed: 0,
            augment: AugmentConfig::default(),
            augment_policy: AugmentPolicy::Off,
        }
    }

    pub fn classification() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 15,
            epochs: 50,
            l2_lambda: 1e-4,
            shuffle: true,
            seed: 0,
            augment: AugmentConfig::default(),
            augment_policy: AugmentPolicy::Oversampled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size and epochs must be >= 1, got {} and {}",
                self.batch_size, self.epochs
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "l2 lambda {} must be >= 0",
                self.l2_lambda
            )));
        }
        self.augment.validate()
    }

    fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            seed: self.seed,
            ..self.augment.clone()
        }
    }

    fn augments(&self, sample: &ImageSample) -> bool {
        match self.augment_policy {
            AugmentPolicy::Off => false,
            AugmentPolicy::Oversampled => sample.oversampled,
            AugmentPolicy::All => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Name of `val_metric` (`dice` or `accuracy`).
    pub metric: String,
    /// Epoch whose weights were kept (lowest validation loss).
    pub best_epoch: Option<usize>,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl History {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_metric\n");
        for r in &self.records {
            let metric = r.val_metric.map(|m| m.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{}", r.epoch, r.train_loss, metric).expect("writing to a String");
        }
        out
    }

    /// Path of the JSON sidecar written next to a history CSV.
    pub fn sidecar(csv: &Path) -> PathBuf {
        csv.with_extension("meta.json")
    }

    /// Writes the CSV and its JSON sidecar (full records plus metadata).
    pub fn write(&self, csv: &Path) -> Result<()> {
        if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let side = Self::sidecar(csv);
        let json = serde_json::to_string_pretty(self).expect("history serializes") + "\n";
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }
}

fn bce(pred: &[f32], target: &[f32]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            let t = t as f64;
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    s / pred.len() as f64
}

/// One optimizer step on a batch; returns the batch BCE (without the penalty).
fn train_step<N: Network>(
    net: &mut N,
    adam: &mut AdamState,
    x: Tensor,
    y: Tensor,
    l2: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let mut pass = Pass::new(net.store(), Mode::Train, true, dropout_seed);
    let xv = pass.graph.constant(x);
    let yv = pass.graph.constant(y);
    let pred = net.forward(&mut pass, xv)?;
    let mut loss = pass.graph.bce_loss(pred, yv)?;
    let data_loss = pass.graph.value(loss).item() as f64;
    let decayed = pass.decayed(net.store());
    if l2 > 0.0 && !decayed.is_empty() {
        let penalty = pass.graph.l2_penalty(&decayed, l2 as f32)?;
        loss = pass.graph.add(loss, penalty)?;
    }
    pass.graph.backward(loss)?;
    let store = net.store_mut();
    store.collect_grads(&pass)?;
    store.apply_batch_stats(&pass.bn_updates);
    store.adam_step(adam)?;
    Ok(data_loss)
}

/// Shared epoch loop. `batch` builds `(inputs, targets)` for the given
/// sample indices in the given (0-based) epoch; `validate` returns
/// `(val_loss, val_metric)` when there is a validation set.
fn fit<N: Network>(
    net: &mut N,
    n_train: usize,
    cfg: &TrainConfig,
    key: &str,
    metric: &str,
    mut batch: impl FnMut(usize, &[usize]) -> Result<(Tensor, Tensor)>,
    mut validate: impl FnMut(&N) -> Result<Option<(f64, f64)>>,
) -> Result<History> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut history = History {
        metric: metric.into(),
        ..Default::default()
    };
    let mut best = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        if cfg.shuffle {
            order.shuffle(&mut stream(
                cfg.seed,
                &format!("{key}/shuffle"),
                epoch as u64,
            ));
        }
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = batch(epoch, idx)?;
            let dropout_seed = stream_seed(cfg.seed, &format!("{key}/dropout"), step);
            total +=
                train_step(net, &mut adam, x, y, cfg.l2_lambda, dropout_seed)? * idx.len() as f64;
            step += 1;
        }
        let val = validate(net)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / n_train as f64,
            val_loss: val.map(|v| v.0),
            val_metric: val.map(|v| v.1),
        };
        log::info!(
            "{key} epoch {}: train loss {:.5} val {:?}",
            record.epoch,
            record.train_loss,
            val
        );
        if let Some((loss, _)) = val {
            if best.as_ref().is_none_or(|(l, _, _)| loss < *l) {
                best = Some((loss, epoch + 1, net.store().clone()));
            }
        }
        history.records.push(record);
    }
    if let Some((_, epoch, store)) = best {
        *net.store_mut() = store;
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}

fn require_masks(samples: &[ImageSample]) -> Result<()> {
    match samples.iter().find(|s| s.mask.is_none()) {
        Some(s) => Err(Error::Dataset(format!("sample `{}` has no mask", s.id))),
        None => Ok(()),
    }
}

fn require_labels(samples: &[ImageSample]) -> Result<Vec<u8>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .filter(|&l| l <= 1)
                .ok_or_else(|| Error::Dataset(format!("sample `{}` has no binary label", s.id)))
        })
        .collect()
}

/// Validation loss and mask scores of a segmentation model.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegEval {
    pub loss: f64,
    pub scores: SegScores,
}

/// Predicted soft masks, one per sample.
pub fn predict_masks(seg: &UNet, samples: &[ImageSample]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_CHUNK) {
        let x = images_to_tensor(&chunk.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
        out.extend(tensor_to_images(&seg.predict(&x)?)?);
    }
    Ok(out)
}

pub fn evaluate_segmentation(seg: &UNet, samples: &[ImageSample]) -> Result<SegEval> {
    require_masks(samples)?;
    if samples.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let masks = predict_masks(seg, samples)?;
    let pred: Vec<f32> = masks.iter().flat_map(|m| m.data.iter().copied()).collect();
    let truth: Vec<f32> = samples
        .iter()
        .flat_map(|s| s.mask.as_ref().expect("checked").data.iter().copied())
        .collect();
    Ok(SegEval {
        loss: bce(&pred, &truth),
        scores: seg_scores(&pred, &truth, 0.5)?,
    })
}

/// Trains the segmentation model against ground-truth masks. When `val` is
/// non-empty the weights of the epoch with the lowest validation loss are
/// kept and the history records validation Dice.
pub fn train_segmentation(
    model: &mut UNet,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<History> {
    require_masks(train)?;
    require_masks(val)?;
    let aug = cfg.augment_config();
    let batch = |epoch: usize, idx: &[usize]| -> Result<(Tensor, Tensor)> {
        let samples: Vec<ImageSample> = idx
            .iter()
            .map(|&i| {
                let s = &train[i];
                if cfg.augments(s) {
                    augment(s, &aug, epoch as u64).0
                } else {
                    s.clone()
                }
            })
            .collect();
        let x = images_to_tensor(&samples.iter().map(|s| &s.pixels).collect::<Vec<_>>())?;
        let y = images_to_tensor(
            &samples
                .iter()
                .map(|s| s.mask.as_ref().expect("checked"))
                .collect::<Vec<_>>(),
        )?;
        Ok((x, y))
    };
    let validate = |net: &UNet| -> Result<Option<(f64, f64)>> {
        if val.is_empty() {
            return Ok(None);
        }
        let e = evaluate_segmentation(net, val)?;
        Ok(Some((e.loss, e.scores.dice)))
    };
    fit(model, train.len(), cfg, "seg", "dice", batch, validate)
}

/// Images the classifier sees: originals, or blends when a segmentation
/// model is supplied.
pub fn classifier_inputs(
    seg: Option<&UNet>,
    bridge: &BridgeConfig,
    images: &[&Image],
) -> Result<Vec<Image>> {
    match seg {
        Some(seg) => Ok(segment_and_blend(seg, images, bridge)?
            .into_iter()
            .map(|b| b.blended)
            .collect()),
        None => Ok(images.iter().map(|&i| i.clone()).collect()),
    }
}

/// Melanoma probability for every sample.
pub fn classify(
    cls: &EffNet,
    seg: Option<&UNet>,
    bridge: &BridgeConfig,
    samples: &[ImageSample],
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_CHUNK) {
        let inputs = classifier_inputs(
            seg,
            bridge,
            &chunk.iter().map(|s| &s.pixels).collect::<Vec<_>>(),
        )?;
        let x = images_to_tensor(&inputs.iter().collect::<Vec<_>>())?;
        out.extend_from_slice(cls.predict(&x)?.data());
    }
    Ok(out)
}

/// Records which bridge settings produced a classifier's inputs.
pub fn bridge_echo(seg: Option<&UNet>, bridge: &BridgeConfig) -> serde_json::Value {
    match seg {
        Some(_) => serde_json::json!({
            "bridge": format!("on, alpha={}", bridge.alpha),
            "alpha": bridge.alpha,
            "mask_mode": bridge.mask_mode,
            "blend": bridge.blend,
        }),
        None => serde_json::json!({ "bridge": "off" }),
    }
}

/// Trains the classifier, optionally on bridge blends from a frozen
/// segmentation model. Augmentation (per `cfg.augment_policy`) is applied
/// before segmentation, as on raw images.
pub fn train_classification(
    model: &mut EffNet,
    seg: Option<&UNet>,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
    bridge: &BridgeConfig,
) -> Result<History> {
    bridge.validate()?;
    let labels = require_labels(train)?;
    let val_labels = require_labels(val)?;
    let aug = cfg.augment_config();
    let mut cache: HashMap<usize, Image> = HashMap::new();
    let batch = |epoch: usize, idx: &[usize]| -> Result<(Tensor, Tensor)> {
        let mut images: Vec<Option<Image>> = idx.iter().map(|i| cache.get(i).cloned()).collect();
        let mut fresh: Vec<(usize, Image, bool)> = Vec::new();
        for (slot, &i) in idx.iter().enumerate() {
            if images[slot].is_some() {
                continue;
            }
            let s = &train[i];
            if cfg.augments(s) {
                fresh.push((slot, augment(s, &aug, epoch as u64).0.pixels, false));
            } else {
                fresh.push((slot, s.pixels.clone(), true));
            }
        }
        let raw: Vec<&Image> = fresh.iter().map(|(_, img, _)| img).collect();
        let ready = classifier_inputs(seg, bridge, &raw)?;
        for ((slot, _, cacheable), img) in fresh.iter().zip(ready) {
            if *cacheable {
                cache.insert(idx[*slot], img.clone());
            }
            images[*slot] = Some(img);
        }
        let images: Vec<Image> = images
            .into_iter()
            .map(|i| i.expect("filled above"))
            .collect();
        let x = images_to_tensor(&images.iter().collect::<Vec<_>>())?;
        let y = Tensor::new(
            [idx.len(), 1],
            idx.iter().map(|&i| labels[i] as f32).collect(),
        )?;
        Ok((x, y))
    };
    let val_inputs: Vec<ImageSample> = if val.is_empty() {
        Vec::new()
    } else {
        let blended = classifier_inputs(
            seg,
            bridge,
            &val.iter().map(|s| &s.pixels).collect::<Vec<_>>(),
        )?;
        val.iter()
            .zip(blended)
            .map(|(s, pixels)| ImageSample {
                pixels,
                ..s.clone()
            })
            .collect()
    };
    let targets: Vec<f32> = val_labels.iter().map(|&l| l as f32).collect();
    let validate = |net: &EffNet| -> Result<Option<(f64, f64)>> {
        if val_inputs.is_empty() {
            return Ok(None);
        }
        let probs = classify(net, None, bridge, &val_inputs)?;
        let acc = metrics(&confusion_matrix(&probs, &val_labels, 0.5)?)?.accuracy;
        Ok(Some((bce(&probs, &targets), acc)))
    };
    let mut history = fit(model, train.len(), cfg, "cls", "accuracy", batch, validate)?;
    if let serde_json::Value::Object(echo) = bridge_echo(seg, bridge) {
        history.meta.extend(echo);
    }
    history
        .meta
        .insert("preset".into(), model.config().preset.clone().into());
    Ok(history)
}

/// Number of images per dataset used for fine-tuning in the reference setup.
pub const FINE_TUNE_PRESET_N: usize = 140;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    /// Multiplies the base learning rate.
    pub lr_scale: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 5,
            lr_scale: 0.1,
        }
    }
}

/// Continues training a copy of `model` on a small set; `model` itself is
/// left untouched.
pub fn fine_tune(
    model: &EffNet,
    seg: Option<&UNet>,
    small: &[ImageSample],
    val: &[ImageSample],
    base: &TrainConfig,
    ft: &FineTuneConfig,
    bridge: &BridgeConfig,
) -> Result<(EffNet, History)> {
    if small.is_empty() {
        return Err(Error::Dataset("fine-tuning set is empty".into()));
    }
    let mut tuned = model.clone();
    let mut history = if ft.epochs == 0 {
        History {
            metric: "accuracy".into(),
            ..Default::default()
        }
    } else {
        let cfg = TrainConfig {
            epochs: ft.epochs,
            lr: base.lr * ft.lr_scale,
            ..base.clone()
        };
        train_classification(&mut tuned, seg, small, val, &cfg, bridge)?
    };
    history
        .meta
        .insert("fine_tune_preset_n".into(), FINE_TUNE_PRESET_N.into());
    history
        .meta
        .insert("fine_tune_n".into(), small.len().into());
    Ok((tuned, history))
}

/// Full inference for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub soft_mask: Image,
    pub binary_mask: Image,
    pub blended: Image,
    pub probability: f32,
    pub label: u8,
}

pub fn predict_pipeline(
    seg: &UNet,
    cls: &EffNet,
    image: &Image,
    bridge: &BridgeConfig,
    threshold: f32,
) -> Result<Prediction> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let b = segment_and_blend(seg, &[image], bridge)?
        .pop()
        .expect("one image in, one out");
    let binary = b
        .soft_mask
        .data
        .iter()
        .map(|&v| if v >= bridge.threshold { 1.0 } else { 0.0 })
        .collect();
    let binary_mask = Image {
        data: binary,
        ..b.soft_mask.clone()
    };
    let probability = cls.predict(&images_to_tensor(&[&b.blended])?)?.item();
    let label = u8::from(probability >= threshold);
    Ok(Prediction {
        soft_mask: b.soft_mask,
        binary_mask,
        blended: b.blended,
        probability,
        label,
    })
}

/// Scores a classifier on labeled samples.
pub fn evaluate_classifier(
    cls: &EffNet,
    seg: Option<&UNet>,
    bridge: &BridgeConfig,
    samples: &[ImageSample],
    threshold: f32,
    split: &str,
) -> Result<EvalReport> {
    let labels = require_labels(samples)?;
    let probs = classify(cls, seg, bridge, samples)?;
    let mut config = bridge_echo(seg, bridge);
    config["preset"] = cls.config().preset.clone().into();
    EvalReport::new(&probs, &labels, threshold, split, config)
}
