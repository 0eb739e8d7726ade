//! Trains the classifier twice on the same split, once on raw images and once
//! on bridge blends from a frozen U-Net, and compares held-out scores.
//!
//! `cargo run --release --example bridge_classification`
use lesionforge::bridge::BridgeConfig;
use lesionforge::data::{stratified_split, synth_generate, SplitSpec};
use lesionforge::effnet::{EffNet, EffNetConfig};
use lesionforge::nn::Network;
use lesionforge::train::{
    evaluate_classifier, train_classification, train_segmentation, TrainConfig,
};
use lesionforge::unet::{UNet, UNetConfig};
use lesionforge::Result;

const SIZE: usize = 64;

fn main() -> Result<()> {
    env_logger::init();
    let seed = 11;
    let mut split = stratified_split(
        synth_generate(100, SIZE, seed)?,
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

    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 12,
        seed,
        ..TrainConfig::classification()
    };
    let bridge = BridgeConfig::with_alpha(0.5);
    for (name, seg) in [("bridge off", None), ("bridge on ", Some(&unet))] {
        let mut cls = EffNet::build(&EffNetConfig::desk(SIZE), seed)?;
        let history = train_classification(&mut cls, seg, &train, &val, &cfg, &bridge)?;
        let report = evaluate_classifier(&cls, seg, &bridge, &test, 0.5, "test")?;
        let m = report.metrics;
        println!(
            "{name}: best epoch {:?}  acc {:.3}  precision {:.3}  recall {:.3}  f1 {:.3}  auc {}",
            history.best_epoch,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            report.auc.map_or("n/a".into(), |a| format!("{a:.3}")),
        );
    }
    println!(
        "classifier parameters: {}",
        EffNet::build(&EffNetConfig::desk(SIZE), seed)?
            .store()
            .count()
    );
    Ok(())
}
