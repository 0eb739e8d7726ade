use super::rng::stream;
use super::Labeled;
use crate::error::{Error, Result};
use rand::seq::index;
use rand::Rng;

/// A label-only stand-in for a sample, for rebalancing metadata without pixels.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MetadataRow {
    pub id: String,
    pub label: u8,
    pub oversampled: bool,
}

impl MetadataRow {
    pub fn new(id: impl Into<String>, label: u8) -> Self {
        MetadataRow {
            id: id.into(),
            label,
            oversampled: false,
        }
    }
}

impl Labeled for MetadataRow {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Option<u8> {
        Some(self.label)
    }
    fn mark_oversampled(&mut self) {
        self.oversampled = true;
    }
}

/// Resamples both classes to exactly `per_class_target` items.
///
/// A class larger than the target is subsampled without replacement. A smaller
/// class keeps every original and is topped up with draws (with replacement)
/// that are marked as oversampled. Output is class 0 then class 1, each in id
/// order with oversampled copies last.
pub fn rebalance<T: Labeled + Clone>(
    samples: Vec<T>,
    per_class_target: usize,
    seed: u64,
) -> Result<Vec<T>> {
    if per_class_target == 0 {
        return Err(Error::InvalidArgument(
            "per-class target must be at least 1".into(),
        ));
    }
    let mut classes: [Vec<T>; 2] = [Vec::new(), Vec::new()];
    for s in samples {
        match s.label() {
            Some(l @ (0 | 1)) => classes[l as usize].push(s),
            Some(l) => {
                return Err(Error::Dataset(format!(
                    "sample `{}` has non-binary label {l}",
                    s.id()
                )))
            }
            None => return Err(Error::Dataset(format!("sample `{}` has no label", s.id()))),
        }
    }
    let mut out = Vec::with_capacity(2 * per_class_target);
    for (class, mut group) in classes.into_iter().enumerate() {
        if group.is_empty() {
            return Err(Error::MissingClass(class as u8));
        }
        group.sort_by(|a, b| a.id().cmp(b.id()));
        let mut rng = stream(seed, &format!("rebalance/class{class}"), 0);
        let n = group.len();
        if n >= per_class_target {
            let mut picked = index::sample(&mut rng, n, per_class_target).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| group[i].clone()));
        } else {
            let extra: Vec<T> = (0..per_class_target - n)
                .map(|_| {
                    let mut copy = group[rng.gen_range(0..n)].clone();
                    copy.mark_oversampled();
                    copy
                })
                .collect();
            out.extend(group);
            out.extend(extra);
        }
    }
    Ok(out)
}
