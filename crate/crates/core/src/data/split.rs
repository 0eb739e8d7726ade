use super::rng::stream;
use super::Labeled;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// Named subset ratios in integer percent.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub names: Vec<String>,
    pub ratios: Vec<u32>,
    pub stratify_by_label: bool,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(parts: &[(&str, u32)], stratify_by_label: bool, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            names: parts.iter().map(|(n, _)| n.to_string()).collect(),
            ratios: parts.iter().map(|&(_, r)| r).collect(),
            stratify_by_label,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_test(seed: u64) -> Self {
        Self::new(&[("train", 75), ("test", 25)], true, seed).expect("valid preset")
    }

    pub fn train_val_test(seed: u64) -> Self {
        Self::new(&[("train", 70), ("val", 15), ("test", 15)], true, seed).expect("valid preset")
    }

    pub fn train_val(seed: u64) -> Self {
        Self::new(&[("train", 80), ("val", 20)], true, seed).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.names.len() != self.ratios.len() {
            return Err(Error::InvalidArgument(
                "split needs one name per ratio".into(),
            ));
        }
        if self.ratios.contains(&0) || self.ratios.iter().sum::<u32>() != 100 {
            return Err(Error::InvalidArgument(format!(
                "split ratios {:?} must be positive and sum to 100",
                self.ratios
            )));
        }
        let mut names = self.names.clone();
        names.sort();
        names.dedup();
        if names.len() != self.names.len() {
            return Err(Error::InvalidArgument("split names must be unique".into()));
        }
        Ok(())
    }
}

/// Disjoint named subsets, each sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub names: Vec<String>,
    pub subsets: Vec<Vec<T>>,
}

impl<T> Split<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.subsets[i].as_slice())
    }

    pub fn take(&mut self, name: &str) -> Option<Vec<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| std::mem::take(&mut self.subsets[i]))
    }
}

/// Largest-remainder apportionment of `n` items by weight.
fn apportion(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|&w| n * w / total).collect();
    let mut rems: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (n * w % total, i))
        .collect();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - counts.iter().sum::<usize>();
    for &(_, i) in rems.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Splits samples by the given ratios, per class when stratifying.
///
/// Each group is sorted by id and shuffled by a stream keyed on the group, so
/// the result does not depend on input order.
pub fn stratified_split<T: Labeled>(samples: Vec<T>, spec: &SplitSpec) -> Result<Split<T>> {
    spec.validate()?;
    let mut groups: BTreeMap<Option<u8>, Vec<T>> = BTreeMap::new();
    for s in samples {
        let key = if spec.stratify_by_label {
            Some(s.label().ok_or_else(|| {
                Error::Dataset(format!("sample `{}` has no label to stratify by", s.id()))
            })?)
        } else {
            None
        };
        groups.entry(key).or_default().push(s);
    }
    let k = spec.ratios.len();
    let mut subsets: Vec<Vec<T>> = (0..k).map(|_| Vec::new()).collect();
    for (key, mut group) in groups {
        if spec.stratify_by_label && group.len() < k {
            return Err(Error::Dataset(format!(
                "class {} has {} samples, fewer than the {k} requested subsets",
                key.unwrap_or_default(),
                group.len()
            )));
        }
        group.sort_by(|a, b| a.id().cmp(b.id()));
        let tag = key.map_or_else(|| "split/all".to_string(), |c| format!("split/class{c}"));
        group.shuffle(&mut stream(spec.seed, &tag, 0));
        let mut rest = group.into_iter();
        let weights: Vec<usize> = spec.ratios.iter().map(|&r| r as usize).collect();
        for (subset, count) in subsets.iter_mut().zip(apportion(rest.len(), &weights)) {
            subset.extend(rest.by_ref().take(count));
        }
    }
    for s in &mut subsets {
        s.sort_by(|a, b| a.id().cmp(b.id()));
    }
    Ok(Split {
        names: spec.names.clone(),
        subsets,
    })
}

/// Draws exactly `n` labeled samples with class proportions matching the
/// input (largest remainder). Returns `(chosen, rest)`, both sorted by id.
pub fn stratified_sample<T: Labeled>(
    samples: Vec<T>,
    n: usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if n > samples.len() {
        return Err(Error::Dataset(format!(
            "cannot sample {n} of {} samples",
            samples.len()
        )));
    }
    let mut groups: BTreeMap<u8, Vec<T>> = BTreeMap::new();
    for s in samples {
        let label = s
            .label()
            .ok_or_else(|| Error::Dataset(format!("sample `{}` has no label", s.id())))?;
        groups.entry(label).or_default().push(s);
    }
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let (mut chosen, mut rest) = (Vec::with_capacity(n), Vec::new());
    for ((label, mut group), count) in groups.into_iter().zip(apportion(n, &sizes)) {
        group.sort_by(|a, b| a.id().cmp(b.id()));
        group.shuffle(&mut stream(seed, &format!("sample/class{label}"), 0));
        rest.extend(group.drain(count..));
        chosen.extend(group);
    }
    chosen.sort_by(|a, b| a.id().cmp(b.id()));
    rest.sort_by(|a, b| a.id().cmp(b.id()));
    Ok((chosen, rest))
}
