//! Blending predicted lesion masks over the original images before
//! classification.

use crate::data::{images_to_tensor, tensor_to_images, write_png, Image};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::unet::UNet;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Soft,
    Binarized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    /// `clamp(image + alpha * mask * highlight)`
    Additive,
    /// `(1 - alpha * mask) * image + alpha * mask * highlight`
    Composite,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BridgeConfig {
    pub alpha: f32,
    pub mask_mode: MaskMode,
    pub threshold: f32,
    pub highlight: [f32; 3],
    pub blend: BlendMode,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            alpha: 0.5,
            mask_mode: MaskMode::Binarized,
            threshold: 0.5,
            highlight: [1.0, 0.0, 0.0],
            blend: BlendMode::Additive,
        }
    }
}

impl BridgeConfig {
    pub fn with_alpha(alpha: f32) -> Self {
        BridgeConfig {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "bridge alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !unit(self.threshold) || !self.highlight.iter().all(|&h| unit(h)) {
            return Err(Error::InvalidArgument(
                "bridge threshold and highlight must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Mask weight actually used at one pixel.
    pub fn weight(&self, m: f32) -> f32 {
        match self.mask_mode {
            MaskMode::Soft => m,
            MaskMode::Binarized => {
                if m >= self.threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Blends one mask over one RGB image.
pub fn apply_bridge(image: &Image, mask: &Image, cfg: &BridgeConfig) -> Result<Image> {
    cfg.validate()?;
    if image.channels != 3 || mask.channels != 1 || !image.same_dims(mask) {
        return Err(Error::shape(
            "apply_bridge",
            format!(
                "image {}x{}x{} with mask {}x{}x{}",
                image.height, image.width, image.channels, mask.height, mask.width, mask.channels
            ),
        ));
    }
    let mut data = image.data.clone();
    for (px, &m) in data.chunks_mut(3).zip(&mask.data) {
        let w = cfg.alpha * cfg.weight(m);
        if w == 0.0 {
            continue;
        }
        for (v, &h) in px.iter_mut().zip(&cfg.highlight) {
            *v = match cfg.blend {
                BlendMode::Additive => *v + w * h,
                BlendMode::Composite => (1.0 - w) * *v + w * h,
            }
            .clamp(0.0, 1.0);
        }
    }
    Ok(Image {
        data,
        ..image.clone()
    })
}

/// Soft mask predicted for an image and the blended result.
#[derive(Clone, Debug, PartialEq)]
pub struct Blended {
    pub soft_mask: Image,
    pub blended: Image,
}

const SEGMENT_CHUNK: usize = 8;

/// Runs the segmentation model in inference mode and blends each mask.
pub fn segment_and_blend(
    seg: &UNet,
    images: &[&Image],
    cfg: &BridgeConfig,
) -> Result<Vec<Blended>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(SEGMENT_CHUNK) {
        let masks = tensor_to_images(&seg.predict(&images_to_tensor(chunk)?)?)?;
        for (img, soft_mask) in chunk.iter().zip(masks) {
            let blended = apply_bridge(img, &soft_mask, cfg)?;
            out.push(Blended { soft_mask, blended });
        }
    }
    Ok(out)
}

/// Writes `original | mask | blended` side by side as one RGB PNG.
pub fn export_overlay(image: &Image, mask: &Image, blended: &Image, path: &Path) -> Result<()> {
    if image.channels != 3
        || blended.channels != 3
        || mask.channels != 1
        || !image.same_dims(mask)
        || !image.same_dims(blended)
    {
        return Err(Error::shape(
            "export_overlay",
            "panels must share dims (RGB image, 1-channel mask, RGB blend)",
        ));
    }
    let (h, w) = (image.height, image.width);
    let mut data = Vec::with_capacity(h * w * 9);
    for y in 0..h {
        let row = y * w;
        data.extend_from_slice(&image.data[row * 3..(row + w) * 3]);
        for &m in &mask.data[row..row + w] {
            data.extend_from_slice(&[m, m, m]);
        }
        data.extend_from_slice(&blended.data[row * 3..(row + w) * 3]);
    }
    write_png(path, &Image::new(h, 3 * w, 3, data)?)
}
