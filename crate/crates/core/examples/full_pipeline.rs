//! End to end: segmentation, bridge classification, single-image inference
//! and fine-tuning on a small stratified sample from a second dataset.
//!
//! `cargo run --release --example full_pipeline`
use lesionforge::bridge::BridgeConfig;
use lesionforge::data::{stratified_sample, stratified_split, synth_generate, SplitSpec};
use lesionforge::effnet::{EffNet, EffNetConfig};
use lesionforge::nn::Network;
use lesionforge::train::{
    evaluate_classifier, fine_tune, predict_pipeline, train_classification, train_segmentation,
    FineTuneConfig, TrainConfig,
};
use lesionforge::unet::{UNet, UNetConfig};
use lesionforge::Result;

const SIZE: usize = 64;

fn main() -> Result<()> {
    env_logger::init();
    let seed = 21;
    let mut split = stratified_split(
        synth_generate(80, SIZE, seed)?,
        &SplitSpec::train_val_test(seed),
    )?;
    let (train, val, test) = (
        split.take("train").unwrap(),
        split.take("val").unwrap(),
        split.take("test").unwrap(),
    );

    let mut unet = UNet::build(&UNetConfig::with_base(8), seed)?;
    train_segmentation(
        &mut unet,
        &train,
        &val,
        &TrainConfig {
            batch_size: 4,
            epochs: 10,
            seed,
            ..TrainConfig::segmentation()
        },
    )?;

    let bridge = BridgeConfig::with_alpha(0.5);
    let base = TrainConfig {
        batch_size: 8,
        epochs: 12,
        seed,
        ..TrainConfig::classification()
    };
    let mut cls = EffNet::build(&EffNetConfig::desk(SIZE), seed)?;
    train_classification(&mut cls, Some(&unet), &train, &val, &base, &bridge)?;
    let before = evaluate_classifier(&cls, Some(&unet), &bridge, &test, 0.5, "test")?;
    println!("source test accuracy {:.3}", before.metrics.accuracy);

    let p = predict_pipeline(&unet, &cls, &test[0].pixels, &bridge, 0.5)?;
    let lesion = p.binary_mask.data.iter().filter(|&&v| v > 0.0).count();
    println!(
        "{}: p(melanoma) = {:.3}, label {} (truth {:?}), {lesion} lesion pixels",
        test[0].id, p.probability, p.label, test[0].label
    );

    // A second "dataset" with a different seed stands in for a new clinic.
    let target = synth_generate(60, SIZE, seed + 100)?;
    let (small, rest) = stratified_sample(target, 20, seed)?;
    let zero_shot = evaluate_classifier(&cls, Some(&unet), &bridge, &rest, 0.5, "target")?;
    let (tuned, history) = fine_tune(
        &cls,
        Some(&unet),
        &small,
        &[],
        &base,
        &FineTuneConfig::default(),
        &bridge,
    )?;
    let after = evaluate_classifier(&tuned, Some(&unet), &bridge, &rest, 0.5, "target")?;
    println!(
        "fine-tuned on {} images for {} epochs: target accuracy {:.3} -> {:.3}",
        small.len(),
        history.records.len(),
        zero_shot.metrics.accuracy,
        after.metrics.accuracy
    );
    let moved = cls
        .store()
        .params()
        .iter()
        .zip(tuned.store().params())
        .filter(|(a, b)| a.tensor.data() != b.tensor.data())
        .count();
    println!(
        "{moved} of {} parameter tensors differ from the source model",
        cls.store().params().len()
    );
    Ok(())
}
