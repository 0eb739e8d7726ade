use super::{Image, ImageSample};
use crate::error::{Error, Result};

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if img.height == 0 || img.width == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(
            "cannot resize to or from a zero-sized image".into(),
        ));
    }
    if img.height == height && img.width == width {
        return Ok(img.clone());
    }
    let c = img.channels;
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let rows = taps(height, img.height);
    let cols = taps(width, img.width);
    let mut data = Vec::with_capacity(height * width * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - fx) + img.at(y0, x1, ch) * fx;
                let bottom = img.at(y1, x0, ch) * (1.0 - fx) + img.at(y1, x1, ch) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(height, width, c, data)
}

/// Resizes pixels and mask (kept soft) to `size x size`.
pub fn resize_normalize(sample: &ImageSample, size: usize) -> Result<ImageSample> {
    let mut out = sample.clone();
    out.pixels = resize_bilinear(&sample.pixels, size, size)?;
    if let Some(m) = &sample.mask {
        out.mask = Some(resize_bilinear(m, size, size)?);
    }
    Ok(out)
}
