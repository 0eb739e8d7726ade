use super::rng::stream;
use super::{Image, ImageSample};
use crate::error::{Error, Result};
use rand::Rng;

/// Random geometric augmentation ranges.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Rotation angle is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Horizontal shift is drawn from `[-f, f]` times the width.
    pub width_shift_frac: f64,
    pub height_shift_frac: f64,
    /// Zoom factor is drawn from `[1 - z, 1 + z]`.
    pub zoom_frac: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            width_shift_frac: 0.2,
            height_shift_frac: 0.0,
            zoom_frac: 0.2,
            horizontal_flip: true,
            vertical_flip: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled(seed: u64) -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            width_shift_frac: 0.0,
            height_shift_frac: 0.0,
            zoom_frac: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rotation_deg must be >= 0, got {}",
                self.rotation_deg
            )));
        }
        for (name, f) in [
            ("width_shift_frac", self.width_shift_frac),
            ("height_shift_frac", self.height_shift_frac),
            ("zoom_frac", self.zoom_frac),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }

    /// Draws one parameter set. Every field is drawn even when disabled so
    /// that toggling one option does not shift the others' random values.
    pub fn sample_params(&self, rng: &mut impl Rng) -> AugmentParams {
        let mut sym = |r: f64| (2.0 * rng.gen::<f64>() - 1.0) * r;
        let rotation_deg = sym(self.rotation_deg);
        let shift_x_frac = sym(self.width_shift_frac);
        let shift_y_frac = sym(self.height_shift_frac);
        let zoom = 1.0 + sym(self.zoom_frac);
        let flip_h = rng.gen_bool(0.5) && self.horizontal_flip;
        let flip_v = rng.gen_bool(0.5) && self.vertical_flip;
        AugmentParams {
            rotation_deg,
            shift_x_frac,
            shift_y_frac,
            zoom,
            flip_h,
            flip_v,
        }
    }
}

/// One concrete geometric transform.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentParams {
    /// Counterclockwise as displayed.
    pub rotation_deg: f64,
    /// Shift as a fraction of width (positive moves content right).
    pub shift_x_frac: f64,
    /// Shift as a fraction of height (positive moves content down).
    pub shift_y_frac: f64,
    /// Content scale; above 1 zooms in.
    pub zoom: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            shift_x_frac: 0.0,
            shift_y_frac: 0.0,
            zoom: 1.0,
            flip_h: false,
            flip_v: false,
        }
    }

    fn is_rigid_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.shift_x_frac == 0.0
            && self.shift_y_frac == 0.0
            && self.zoom == 1.0
    }

    /// Maps an output pixel coordinate `(x, y)` back to the source coordinate
    /// it samples, for an image of the given size.
    pub fn source_coord(&self, x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let x = if self.flip_h {
            width as f64 - 1.0 - x
        } else {
            x
        };
        let y = if self.flip_v {
            height as f64 - 1.0 - y
        } else {
            y
        };
        let dx = (x - cx - self.shift_x_frac * width as f64) / self.zoom;
        let dy = (y - cy - self.shift_y_frac * height as f64) / self.zoom;
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        // forward rotation is (c, s; -s, c) in y-down coordinates; apply its transpose
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    }
}

fn warp(img: &Image, p: &AugmentParams) -> Image {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut out = Vec::with_capacity(img.data.len());
    let rigid = p.is_rigid_identity();
    for y in 0..h {
        for x in 0..w {
            if rigid {
                let sx = if p.flip_h { w - 1 - x } else { x };
                let sy = if p.flip_v { h - 1 - y } else { y };
                out.extend_from_slice(&img.data[(sy * w + sx) * ch..(sy * w + sx + 1) * ch]);
                continue;
            }
            let (sx, sy) = p.source_coord(x as f64, y as f64, h, w);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..ch {
                let top = img.at(y0, x0, c) * (1.0 - fx) + img.at(y0, x1, c) * fx;
                let bot = img.at(y1, x0, c) * (1.0 - fx) + img.at(y1, x1, c) * fx;
                out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height: h,
        width: w,
        channels: ch,
        data: out,
    }
}

/// Applies a fixed transform to the image and, identically, to its mask.
pub fn augment_with(sample: &ImageSample, params: &AugmentParams) -> ImageSample {
    let mut out = sample.clone();
    out.pixels = warp(&sample.pixels, params);
    out.mask = sample.mask.as_ref().map(|m| warp(m, params));
    out
}

/// Draws parameters from the stream keyed by `(cfg.seed, sample.id, draw)` and
/// applies them.
pub fn augment(
    sample: &ImageSample,
    cfg: &AugmentConfig,
    draw: u64,
) -> (ImageSample, AugmentParams) {
    let mut rng = stream(cfg.seed, &format!("augment/{}", sample.id), draw);
    let params = cfg.sample_params(&mut rng);
    (augment_with(sample, &params), params)
}
