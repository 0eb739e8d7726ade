//! Saves and restores both models, and shows that a checkpoint refuses to
//! load as the wrong architecture.
//!
//! `cargo run --release --example checkpoints [out_dir]`
use lesionforge::data::{images_to_tensor, synth_generate};
use lesionforge::effnet::{EffNet, EffNetConfig};
use lesionforge::nn::Network;
use lesionforge::train::{
    load_checkpoint, load_network, save_checkpoint, train_segmentation, TrainConfig,
};
use lesionforge::unet::{UNet, UNetConfig};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/example-out/checkpoints".into()),
    );
    std::fs::create_dir_all(&out)?;
    let data = synth_generate(8, 32, 4)?;

    let mut unet = UNet::build(
        &UNetConfig {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        },
        4,
    )?;
    train_segmentation(
        &mut unet,
        &data,
        &[],
        &TrainConfig {
            batch_size: 4,
            epochs: 2,
            seed: 4,
            ..TrainConfig::segmentation()
        },
    )?;
    let path = out.join("unet.ckpt");
    save_checkpoint(&unet, serde_json::json!({ "epoch": 2 }), &path)?;

    let ckpt = load_checkpoint(&path)?;
    println!(
        "{}: kind {} with {} tensors",
        path.display(),
        ckpt.descriptor.kind,
        ckpt.tensors.len()
    );
    let (restored, meta): (UNet, _) = load_network(&path)?;
    let x = images_to_tensor(&[&data[0].pixels])?;
    println!(
        "meta {meta}; predictions identical: {}",
        restored.predict(&x)?.data() == unet.predict(&x)?.data()
    );

    match load_network::<EffNet>(&path) {
        Ok(_) => println!("unexpected: loaded a U-Net as EffNet"),
        Err(e) => println!("loading as EffNet fails: {e}"),
    }

    let cls = EffNet::build(&EffNetConfig::desk(32), 4)?;
    let cls_path = out.join("cls.ckpt");
    save_checkpoint(&cls, serde_json::Value::Null, &cls_path)?;
    let (back, _): (EffNet, _) = load_network(&cls_path)?;
    println!(
        "classifier round trip equal: {}",
        back.store() == cls.store()
    );
    Ok(())
}
