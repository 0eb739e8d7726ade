//! Trains a small U-Net on synthetic lesions and reports Dice / IoU on a
//! held-out split.
//!
//! `cargo run --release --example train_segmentation [out_dir]`
use lesionforge::data::{stratified_split, synth_generate, write_png, SplitSpec};
use lesionforge::nn::Network;
use lesionforge::train::{
    evaluate_segmentation, predict_masks, save_checkpoint, train_segmentation, TrainConfig,
};
use lesionforge::unet::{UNet, UNetConfig};
use lesionforge::Result;
use std::path::PathBuf;

fn main() -> Result<()> {
    env_logger::init();
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/example-out/train_segmentation".into()),
    );
    let mut split = stratified_split(synth_generate(80, 64, 3)?, &SplitSpec::train_val_test(3))?;
    let (train, val, test) = (
        split.take("train").unwrap(),
        split.take("val").unwrap(),
        split.take("test").unwrap(),
    );

    let mut unet = UNet::build(&UNetConfig::with_base(8), 3)?;
    println!("U-Net with {} parameters", unet.store().count());
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 10,
        seed: 3,
        ..TrainConfig::segmentation()
    };
    let history = train_segmentation(&mut unet, &train, &val, &cfg)?;
    for r in &history.records {
        println!(
            "epoch {:>2}  train {:.4}  val {:.4}  dice {:.3}",
            r.epoch,
            r.train_loss,
            r.val_loss.unwrap_or(f64::NAN),
            r.val_metric.unwrap_or(f64::NAN)
        );
    }
    println!("kept epoch {:?}", history.best_epoch);

    let eval = evaluate_segmentation(&unet, &test)?;
    println!(
        "test: pixel acc {:.3}  dice {:.3}  iou {:.3}",
        eval.scores.pixel_accuracy, eval.scores.dice, eval.scores.iou
    );

    let masks = predict_masks(&unet, &test[..2])?;
    for (s, m) in test.iter().zip(&masks) {
        write_png(&out.join(format!("{}_mask.png", s.id)), m)?;
    }
    save_checkpoint(
        &unet,
        serde_json::json!({ "seed": 3 }),
        &out.join("unet.ckpt"),
    )?;
    history.write(&out.join("unet.history.csv"))?;
    println!("wrote {}", out.display());
    Ok(())
}
