//! On-disk dataset layouts.
//!
//! ```text
//! isic:   <root>/images/<id>.png   <root>/labels.csv    (image_name,target)
//! ham:    <root>/images/<id>.png   <root>/masks/<id>_segmentation.png
//!         [<root>/metadata.csv]                         (image_id,dx)
//! hybrid: union of both (what the synthetic generator writes)
//! ```

use super::{Image, ImageSample, Source};
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Ham,
    Isic,
    Hybrid,
}

const MASK_SUFFIX: &str = "_segmentation";

/// Reads a PNG as 1 or 3 channels scaled to `[0, 1]`.
pub fn read_png(path: &Path, channels: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {channels}"
            )))
        }
    };
    Image::new(
        h,
        w,
        channels,
        raw.into_iter().map(|v| v as f32 / 255.0).collect(),
    )
}

/// Writes a 1- or 3-channel image as an 8-bit PNG, quantizing with
/// round-half-up.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::InvalidArgument(format!(
                "cannot write {c}-channel PNG"
            )))
        }
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if !seen.insert(stem.to_string()) {
            return Err(Error::DuplicateId(stem.to_string()));
        }
        out.push((stem.to_string(), path));
    }
    out.sort();
    Ok(out)
}

fn read_csv_pairs(path: &Path, header: [&str; 2]) -> Result<Vec<(String, String)>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let found = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .clone();
    if found.len() < 2 || found[0].trim() != header[0] || found[1].trim() != header[1] {
        return Err(Error::Dataset(format!(
            "{}: expected header `{},{}`",
            path.display(),
            header[0],
            header[1]
        )));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        rows.push((rec[0].trim().to_string(), rec[1].trim().to_string()));
    }
    Ok(rows)
}

/// Loads every image of a dataset directory, sorted by id.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<ImageSample>> {
    let image_dir = root.join("images");
    if !image_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} has no images/ directory",
            root.display()
        )));
    }
    let source = match layout {
        Layout::Ham => Source::Ham10000,
        Layout::Isic => Source::Isic2020,
        Layout::Hybrid => Source::Synthetic,
    };
    let files: BTreeMap<String, PathBuf> = png_stems(&image_dir)?
        .into_iter()
        .filter(|(stem, _)| !stem.ends_with(MASK_SUFFIX))
        .collect();

    let labels_path = root.join("labels.csv");
    let mut labels = BTreeMap::new();
    let want_labels = match layout {
        Layout::Isic => true,
        Layout::Hybrid => labels_path.exists(),
        Layout::Ham => false,
    };
    if want_labels {
        for (id, target) in read_csv_pairs(&labels_path, ["image_name", "target"])? {
            let label: u8 = target.parse().map_err(|_| {
                Error::Dataset(format!(
                    "label `{target}` for `{id}` is not a small non-negative integer"
                ))
            })?;
            if !files.contains_key(&id) {
                return Err(Error::Dataset(format!(
                    "labels.csv references missing image `{id}`"
                )));
            }
            if labels.insert(id.clone(), label).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
    }

    let meta_path = root.join("metadata.csv");
    let mut lesion_types = BTreeMap::new();
    if layout != Layout::Isic && meta_path.exists() {
        for (id, dx) in read_csv_pairs(&meta_path, ["image_id", "dx"])? {
            if !files.contains_key(&id) {
                return Err(Error::Dataset(format!(
                    "metadata.csv references missing image `{id}`"
                )));
            }
            if lesion_types.insert(id.clone(), dx).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
    }

    let mask_dir = root.join("masks");
    let mut samples = Vec::new();
    for (id, path) in &files {
        // The isic layout only lists labeled images.
        if layout == Layout::Isic && !labels.contains_key(id) {
            continue;
        }
        let mut sample = ImageSample::new(id.clone(), read_png(path, 3)?, source);
        sample.label = labels.get(id).copied();
        sample.lesion_type = lesion_types.get(id).cloned();
        let mask_path = mask_dir.join(format!("{id}{MASK_SUFFIX}.png"));
        if layout != Layout::Isic && mask_path.exists() {
            let mut mask = read_png(&mask_path, 1)?;
            for v in &mut mask.data {
                *v = if *v >= 128.0 / 255.0 { 1.0 } else { 0.0 };
            }
            sample = sample.with_mask(mask)?;
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples in the hybrid layout: images, masks for samples that have
/// one, `labels.csv` for labeled samples and `metadata.csv` for samples with a
/// lesion type. Output bytes depend only on the samples.
pub fn write_dataset(root: &Path, samples: &[ImageSample]) -> Result<()> {
    let mut sorted: Vec<&ImageSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = BTreeSet::new();
    for s in &sorted {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
    }
    let mut labels = String::from("image_name,target\n");
    let mut meta = String::from("image_id,dx\n");
    let (mut any_label, mut any_meta) = (false, false);
    for s in &sorted {
        write_png(
            &root.join("images").join(format!("{}.png", s.id)),
            &s.pixels,
        )?;
        if let Some(mask) = &s.mask {
            write_png(
                &root
                    .join("masks")
                    .join(format!("{}{MASK_SUFFIX}.png", s.id)),
                mask,
            )?;
        }
        if let Some(l) = s.label {
            labels.push_str(&format!("{},{l}\n", s.id));
            any_label = true;
        }
        if let Some(dx) = &s.lesion_type {
            meta.push_str(&format!("{},{dx}\n", s.id));
            any_meta = true;
        }
    }
    if any_label {
        let p = root.join("labels.csv");
        fs::write(&p, labels).map_err(|e| Error::io(p, e))?;
    }
    if any_meta {
        let p = root.join("metadata.csv");
        fs::write(&p, meta).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
