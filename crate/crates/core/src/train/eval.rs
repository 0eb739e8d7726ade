use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Binary confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

fn check_pairs(probs: &[f32], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("non-binary label {l}")));
    }
    Ok(())
}

/// Counts `prob >= threshold` as a positive prediction.
pub fn confusion_matrix(probs: &[f32], labels: &[u8], threshold: f32) -> Result<Counts> {
    check_pairs(probs, labels)?;
    let mut c = Counts::default();
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Standard ratios. Precision, recall and F1 are 0 when their denominator is 0.
pub fn metrics(c: &Counts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "metrics of an empty confusion matrix".into(),
        ));
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, total),
        precision,
        recall,
        f1,
    })
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one step per distinct
/// score in descending order, and the trapezoid area under them.
pub fn roc_auc(probs: &[f32], labels: &[u8]) -> Result<(Vec<(f64, f64)>, f64)> {
    check_pairs(probs, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("ROC needs both classes".into()));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = probs[order[i]];
        while i < order.len() && probs[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("starts non-empty");
        let (x, y) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (x - x0) * (y + y0) / 2.0;
        points.push((x, y));
    }
    Ok((points, auc))
}

/// Pixel-level agreement between a predicted and a reference mask.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegScores {
    pub pixel_accuracy: f64,
    /// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
    pub dice: f64,
    /// `|A∩B| / |A∪B|`, 1 when both masks are empty.
    pub iou: f64,
}

/// Scores soft predictions thresholded at `threshold` against masks
/// thresholded at 0.5.
pub fn seg_scores(pred: &[f32], truth: &[f32], threshold: f32) -> Result<SegScores> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "mask sizes {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut inter, mut a, mut b, mut agree) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p >= threshold, t >= 0.5);
        inter += (p && t) as u64;
        a += p as u64;
        b += t as u64;
        agree += (p == t) as u64;
    }
    let union = a + b - inter;
    let (dice, iou) = if union == 0 {
        (1.0, 1.0)
    } else {
        (
            2.0 * inter as f64 / (a + b) as f64,
            inter as f64 / union as f64,
        )
    };
    Ok(SegScores {
        pixel_accuracy: agree as f64 / pred.len() as f64,
        dice,
        iou,
    })
}

/// Classification evaluation with its provenance.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Which subset was scored (`val`, `test`, ...).
    pub split: String,
    pub samples: u64,
    pub threshold: f32,
    pub counts: Counts,
    pub metrics: Metrics,
    /// Omitted when only one class is present.
    pub auc: Option<f64>,
    pub roc_points: Option<Vec<(f64, f64)>>,
    /// Bridge and model settings the scores were produced with.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(
        probs: &[f32],
        labels: &[u8],
        threshold: f32,
        split: &str,
        config: serde_json::Value,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidArgument(format!(
                "threshold {threshold} outside [0, 1]"
            )));
        }
        let counts = confusion_matrix(probs, labels, threshold)?;
        let metrics = metrics(&counts)?;
        let (roc_points, auc) = match roc_auc(probs, labels) {
            Ok((pts, auc)) => (Some(pts), Some(auc)),
            Err(_) => {
                log::warn!("evaluation set has a single class; AUC omitted");
                (None, None)
            }
        };
        Ok(EvalReport {
            split: split.into(),
            samples: counts.total(),
            threshold,
            counts,
            metrics,
            auc,
            roc_points,
            config,
        })
    }

    /// Writes `report.json` and, when available, `roc.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let path = dir.join("report.json");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        if let Some(points) = &self.roc_points {
            let mut csv = String::from("fpr,tpr\n");
            for (x, y) in points {
                writeln!(csv, "{x},{y}").expect("writing to a String");
            }
            let path = dir.join("roc.csv");
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        assert_eq!(
            confusion_matrix(&[0.9, 0.1], &[1, 0], 0.5).unwrap(),
            Counts {
                tp: 1,
                fp: 0,
                tn: 1,
                fn_: 0
            }
        );
        let c = confusion_matrix(&[0.1, 0.9, 0.2], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion_matrix(&[0.1], &[1, 0], 0.5).is_err());
        assert_eq!(confusion_matrix(&[0.5], &[1], 0.5).unwrap().tp, 1);
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&Counts {
            tp: 1,
            fp: 0,
            tn: 1,
            fn_: 0,
        })
        .unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let m = metrics(&Counts {
            tp: 0,
            fp: 0,
            tn: 3,
            fn_: 2,
        })
        .unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(metrics(&Counts::default()).is_err());
    }

    #[test]
    fn roc_examples() {
        let (pts, auc) = roc_auc(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        let (pts, auc) = roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(auc, 0.5);
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(roc_auc(&[0.2, 0.4], &[1, 1]).is_err());
    }

    #[test]
    fn seg_score_examples() {
        let s = seg_scores(&[0.9, 0.9, 0.1, 0.1], &[1.0, 0.0, 1.0, 0.0], 0.5).unwrap();
        assert_eq!(s.pixel_accuracy, 0.5);
        assert_eq!(s.dice, 0.5);
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(seg_scores(&[0.0; 3], &[0.0; 3], 0.5).unwrap().dice, 1.0);
    }

    #[test]
    fn report_is_self_consistent_and_written() {
        let probs = [0.9, 0.2, 0.7, 0.4, 0.6];
        let labels = [1, 0, 0, 1, 1];
        let r = EvalReport::new(
            &probs,
            &labels,
            0.5,
            "test",
            serde_json::json!({"bridge": "off"}),
        )
        .unwrap();
        let c = r.counts;
        assert_eq!(r.metrics.accuracy, (c.tp + c.tn) as f64 / c.total() as f64);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let back: EvalReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(back, r);
        let roc = fs::read_to_string(dir.path().join("roc.csv")).unwrap();
        assert!(roc.starts_with("fpr,tpr\n0,0\n") && roc.trim_end().ends_with("1,1"));
    }

    #[test]
    fn single_class_report_omits_auc() {
        let r = EvalReport::new(&[0.2, 0.8], &[1, 1], 0.5, "val", serde_json::Value::Null).unwrap();
        assert!(r.auc.is_none() && r.roc_points.is_none());
        assert_eq!(r.metrics.recall, 0.5);
    }
}
