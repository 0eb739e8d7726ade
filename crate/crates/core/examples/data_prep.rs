//! Synthetic dataset generation, cleaning, stratified splitting, rebalancing
//! and keyed augmentation.
//!
//! `cargo run --release --example data_prep [out_dir]`
use lesionforge::data::{
    augment, dedup_clean, rebalance, stratified_split, synth_generate, write_dataset, write_png,
    AugmentConfig, SplitSpec,
};
use lesionforge::Result;
use std::path::PathBuf;

fn main() -> Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/example-out/data_prep".into()),
    );

    let samples = synth_generate(60, 64, 7)?;
    let (samples, report) = dedup_clean(samples);
    println!(
        "generated {} samples, removed {}",
        samples.len(),
        report.removed.len()
    );

    let mut split = stratified_split(samples, &SplitSpec::train_val_test(7))?;
    for (name, subset) in split.names.iter().zip(&split.subsets) {
        let pos = subset.iter().filter(|s| s.label == Some(1)).count();
        println!("{name:>5}: {:>3} samples ({pos} melanoma)", subset.len());
    }

    // Make the training set imbalanced, then oversample the minority back up.
    let train = split.take("train").expect("named subset");
    let skewed: Vec<_> = train
        .into_iter()
        .enumerate()
        .filter(|(i, s)| s.label == Some(0) || i % 3 == 0)
        .map(|(_, s)| s)
        .collect();
    let minority = skewed.iter().filter(|s| s.label == Some(1)).count();
    let majority = skewed.len() - minority;
    let balanced = rebalance(skewed, majority, 7)?;
    let copies = balanced.iter().filter(|s| s.oversampled).count();
    println!(
        "rebalanced {majority}/{minority} to {} ({copies} oversampled copies)",
        balanced.len()
    );

    let cfg = AugmentConfig {
        seed: 7,
        ..Default::default()
    };
    let first = &balanced[0];
    for draw in 0..3 {
        let (aug, params) = augment(first, &cfg, draw);
        println!("draw {draw}: {params:?}");
        write_png(&out.join(format!("augmented_{draw}.png")), &aug.pixels)?;
    }
    // Oversampled copies share ids, so only untouched subsets go to disk.
    write_dataset(&out.join("test"), split.get("test").expect("named subset"))?;
    println!("wrote {}", out.display());
    Ok(())
}
