use super::ImageSample;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

/// The seven HAM10000 diagnostic categories.
pub const HAM_CATEGORIES: [&str; 7] = ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RemovalReason {
    /// Pixel-identical to an earlier sample.
    Duplicate { of: String },
    /// Label outside `{0, 1}`.
    InvalidLabel(u8),
    /// Mask values outside `[0, 1]` or mask dims differ from the image.
    InvalidMask,
    /// Pixel values outside `[0, 1]`.
    InvalidPixels,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Removal {
    pub id: String,
    pub reason: RemovalReason,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub removed: Vec<Removal>,
}

impl CleanReport {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty()
    }
}

fn pixel_hash(s: &ImageSample) -> u64 {
    let mut h = DefaultHasher::new();
    (s.pixels.height, s.pixels.width, s.pixels.channels).hash(&mut h);
    for v in &s.pixels.data {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Drops exact pixel duplicates (keeping the first occurrence) and samples
/// that violate the schema. Every removal is listed in the report.
pub fn dedup_clean(samples: Vec<ImageSample>) -> (Vec<ImageSample>, CleanReport) {
    let mut kept: Vec<ImageSample> = Vec::with_capacity(samples.len());
    let mut by_hash: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut report = CleanReport::default();
    for s in samples {
        if let Some(l) = s.label.filter(|&l| l > 1) {
            report.removed.push(Removal {
                id: s.id,
                reason: RemovalReason::InvalidLabel(l),
            });
            continue;
        }
        if !s.pixels.in_unit_range() {
            report.removed.push(Removal {
                id: s.id,
                reason: RemovalReason::InvalidPixels,
            });
            continue;
        }
        if let Some(m) = &s.mask {
            if !m.in_unit_range() || !m.same_dims(&s.pixels) {
                report.removed.push(Removal {
                    id: s.id,
                    reason: RemovalReason::InvalidMask,
                });
                continue;
            }
        }
        let h = pixel_hash(&s);
        let bucket = by_hash.entry(h).or_default();
        if let Some(&first) = bucket.iter().find(|&&k| kept[k].pixels == s.pixels) {
            let of = kept[first].id.clone();
            report.removed.push(Removal {
                id: s.id,
                reason: RemovalReason::Duplicate { of },
            });
            continue;
        }
        bucket.push(kept.len());
        kept.push(s);
    }
    (kept, report)
}

/// Relabels HAM samples as melanoma (`mel` -> 1) versus everything else
/// (other known categories -> 0) and drops samples whose category is missing
/// or unknown. With `keep_only_melanoma` the non-melanoma samples are dropped
/// as well.
pub fn filter_melanoma_task(
    samples: Vec<ImageSample>,
    keep_only_melanoma: bool,
) -> Vec<ImageSample> {
    samples
        .into_iter()
        .filter_map(|mut s| {
            let dx = s.lesion_type.as_deref()?.trim().to_ascii_lowercase();
            if !HAM_CATEGORIES.contains(&dx.as_str()) {
                return None;
            }
            let label = u8::from(dx == "mel");
            if keep_only_melanoma && label == 0 {
                return None;
            }
            s.label = Some(label);
            Some(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Source};

    fn sample(id: &str, v: f32) -> ImageSample {
        ImageSample::new(id, Image::filled(2, 2, 3, v), Source::Ham10000)
    }

    #[test]
    fn identical_images_keep_first() {
        let (kept, report) =
            dedup_clean(vec![sample("a", 0.5), sample("b", 0.5), sample("c", 0.1)]);
        assert_eq!(
            kept.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
            ["a", "c"]
        );
        assert_eq!(
            report.removed,
            vec![Removal {
                id: "b".into(),
                reason: RemovalReason::Duplicate { of: "a".into() }
            }]
        );
    }

    #[test]
    fn distinct_set_is_unchanged() {
        let input: Vec<_> = (0..5)
            .map(|i| sample(&format!("s{i}"), i as f32 / 5.0))
            .collect();
        let (kept, report) = dedup_clean(input.clone());
        assert_eq!(kept, input);
        assert!(report.is_empty());
    }

    #[test]
    fn out_of_schema_label_is_dropped() {
        let input = vec![
            sample("a", 0.1).with_label(0),
            sample("b", 0.2).with_label(3),
            sample("c", 0.3).with_label(1),
        ];
        let (kept, report) = dedup_clean(input);
        assert_eq!(kept.len(), 2);
        assert_eq!(
            report.removed,
            vec![Removal {
                id: "b".into(),
                reason: RemovalReason::InvalidLabel(3)
            }]
        );
    }

    #[test]
    fn bad_mask_is_dropped() {
        let mut s = sample("m", 0.4);
        s.mask = Some(Image::filled(2, 2, 1, 1.5));
        let (kept, report) = dedup_clean(vec![s]);
        assert!(kept.is_empty());
        assert_eq!(report.removed[0].reason, RemovalReason::InvalidMask);
    }

    #[test]
    fn melanoma_binarization() {
        let mut mel = sample("a", 0.1);
        mel.lesion_type = Some("mel".into());
        let mut nv = sample("b", 0.2);
        nv.lesion_type = Some("nv".into());
        let out = filter_melanoma_task(vec![mel.clone(), nv.clone()], false);
        assert_eq!(out[0].label, Some(1));
        assert_eq!(out[1].label, Some(0));
        let only = filter_melanoma_task(vec![mel, nv], true);
        assert_eq!(only.len(), 1);
    }

    #[test]
    fn mixed_categories_match_tally() {
        let counts = [
            ("akiec", 3),
            ("bcc", 2),
            ("bkl", 4),
            ("df", 1),
            ("mel", 5),
            ("nv", 9),
            ("vasc", 2),
            ("???", 2),
        ];
        let mut input = Vec::new();
        for (dx, n) in counts {
            for i in 0..n {
                let mut s = sample(&format!("{dx}{i}"), 0.0);
                s.lesion_type = Some(dx.into());
                input.push(s);
            }
        }
        input.push(sample("no_meta", 0.0));
        let out = filter_melanoma_task(input, false);
        let ones = out.iter().filter(|s| s.label == Some(1)).count();
        let zeros = out.iter().filter(|s| s.label == Some(0)).count();
        assert_eq!(ones, 5);
        assert_eq!(zeros, 3 + 2 + 4 + 1 + 9 + 2);
    }
}
