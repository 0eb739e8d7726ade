//! Renders `original | mask | blend` panels for several alphas and both blend
//! modes, using a ground-truth mask so no training is needed.
//!
//! `cargo run --release --example bridge_preview [out_dir]`
use lesionforge::bridge::{apply_bridge, export_overlay, BlendMode, BridgeConfig, MaskMode};
use lesionforge::data::synth_generate;
use lesionforge::Result;
use std::path::PathBuf;

fn main() -> Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/example-out/bridge_preview".into()),
    );
    let sample = synth_generate(2, 96, 5)?
        .into_iter()
        .find(|s| s.label == Some(1))
        .expect("one melanoma sample");
    let mask = sample.mask.as_ref().expect("synthetic samples carry masks");

    for blend in [BlendMode::Additive, BlendMode::Composite] {
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let cfg = BridgeConfig {
                alpha,
                blend,
                mask_mode: MaskMode::Soft,
                ..Default::default()
            };
            let blended = apply_bridge(&sample.pixels, mask, &cfg)?;
            let changed = blended
                .data
                .iter()
                .zip(&sample.pixels.data)
                .filter(|(a, b)| a != b)
                .count()
                / 3;
            let path = out.join(format!("{blend:?}_{alpha:.2}.png").to_lowercase());
            export_overlay(&sample.pixels, mask, &blended, &path)?;
            println!(
                "{blend:?} alpha {alpha:.2}: {changed} pixels changed -> {}",
                path.display()
            );
        }
    }
    Ok(())
}
