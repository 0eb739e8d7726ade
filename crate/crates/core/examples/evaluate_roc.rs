//! Confusion counts, threshold metrics and the ROC curve for a set of scores,
//! written as `report.json` and `roc.csv`.
//!
//! `cargo run --release --example evaluate_roc [out_dir]`
use lesionforge::train::{confusion_matrix, metrics, roc_auc, EvalReport};
use lesionforge::Result;
use rand::{Rng, SeedableRng};
use std::path::PathBuf;

fn main() -> Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/example-out/evaluate_roc".into()),
    );
    // A noisy scorer: positives centred at 0.65, negatives at 0.35.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 4 == 0)).collect();
    let probs: Vec<f32> = labels
        .iter()
        .map(|&l| (if l == 1 { 0.65 } else { 0.35 } + rng.gen_range(-0.3f32..0.3)).clamp(0.0, 1.0))
        .collect();

    for t in [0.3, 0.5, 0.7] {
        let c = confusion_matrix(&probs, &labels, t)?;
        let m = metrics(&c)?;
        println!(
            "t={t}: tp {} fp {} tn {} fn {}  acc {:.3} prec {:.3} rec {:.3} f1 {:.3}",
            c.tp, c.fp, c.tn, c.fn_, m.accuracy, m.precision, m.recall, m.f1
        );
    }
    let (points, auc) = roc_auc(&probs, &labels)?;
    println!("AUC {auc:.4} over {} ROC points", points.len());

    let report = EvalReport::new(
        &probs,
        &labels,
        0.5,
        "synthetic",
        serde_json::json!({ "scorer": "noisy" }),
    )?;
    report.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
