//! Dataset layer: samples, on-disk layouts, cleaning, resizing, splitting,
//! class rebalancing, augmentation and the synthetic lesion generator.

mod augment;
mod clean;
mod io;
mod rebalance;
mod resize;
pub mod rng;
mod split;
mod synth;

pub use augment::{augment, augment_with, AugmentConfig, AugmentParams};
pub use clean::{
    dedup_clean, filter_melanoma_task, CleanReport, Removal, RemovalReason, HAM_CATEGORIES,
};
pub use io::{load_dataset, read_png, write_dataset, write_png, Layout};
pub use rebalance::{rebalance, MetadataRow};
pub use resize::{resize_bilinear, resize_normalize};
pub use split::{stratified_sample, stratified_split, Split, SplitSpec};
pub use synth::{synth_generate, SynthParams};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `H x W x C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "zero-sized image {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Ham10000,
    Isic2020,
    Isic2019,
    Synthetic,
}

/// One image with its optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Image,
    /// Single-channel mask with the same spatial dims as `pixels`.
    pub mask: Option<Image>,
    /// `0` benign, `1` melanoma. Other values only survive until cleaning.
    pub label: Option<u8>,
    /// Categorical lesion type (`dx` column of the HAM metadata).
    pub lesion_type: Option<String>,
    pub source: Source,
    /// Set on copies produced by oversampling; these get augmented on the fly.
    pub oversampled: bool,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Image, source: Source) -> Self {
        ImageSample {
            id: id.into(),
            pixels,
            mask: None,
            label: None,
            lesion_type: None,
            source,
            oversampled: false,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_mask(mut self, mask: Image) -> Result<Self> {
        if !mask.same_dims(&self.pixels) || mask.channels != 1 {
            return Err(Error::shape(
                "mask",
                format!(
                    "mask {}x{}x{} for image {}x{}",
                    mask.height, mask.width, mask.channels, self.pixels.height, self.pixels.width
                ),
            ));
        }
        self.mask = Some(mask);
        Ok(self)
    }
}

/// Anything that carries an id and an optional binary label.
pub trait Labeled {
    fn id(&self) -> &str;
    fn label(&self) -> Option<u8>;
    /// Marks an oversampled copy.
    fn mark_oversampled(&mut self);
}

impl Labeled for ImageSample {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Option<u8> {
        self.label
    }
    fn mark_oversampled(&mut self) {
        self.oversampled = true;
    }
}

/// Stacks images into an `[N, C, H, W]` tensor.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::shape(
                "images_to_tensor",
                "images in a batch must share dimensions",
            ));
        }
        for ch in 0..c {
            data.extend(img.data.iter().skip(ch).step_by(c));
        }
    }
    Tensor::new([images.len(), c, h, w], data)
}

/// Splits an `[N, C, H, W]` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let [n, c, h, w] = match *t.shape() {
        [n, c, h, w] => [n, c, h, w],
        ref s => {
            return Err(Error::shape(
                "tensor_to_images",
                format!("expected NCHW, got {s:?}"),
            ))
        }
    };
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let src = &t.data()[i * c * plane..(i + 1) * c * plane];
            let mut data = vec![0.0; c * plane];
            for ch in 0..c {
                for p in 0..plane {
                    data[p * c + ch] = src[ch * plane + p];
                }
            }
            Image {
                height: h,
                width: w,
                channels: c,
                data,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_round_trip() {
        let a = Image::new(2, 3, 3, (0..18).map(|v| v as f32 / 18.0).collect()).unwrap();
        let b = Image::filled(2, 3, 3, 0.5);
        let t = images_to_tensor(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        // channel 1 of pixel (0, 1) of the first image
        assert_eq!(t.data()[6 + 1], a.at(0, 1, 1));
        assert_eq!(tensor_to_images(&t).unwrap(), vec![a, b]);
    }

    #[test]
    fn mask_dims_are_checked() {
        let s = ImageSample::new("a", Image::filled(4, 4, 3, 0.0), Source::Synthetic);
        assert!(s.clone().with_mask(Image::filled(4, 5, 1, 0.0)).is_err());
        assert!(s.with_mask(Image::filled(4, 4, 1, 1.0)).is_ok());
    }
}
