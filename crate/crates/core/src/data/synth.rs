use super::rng::stream;
use super::{Image, ImageSample, Source};
use crate::error::{Error, Result};
use rand::Rng;
use std::f64::consts::PI;

/// Geometry and colouring of one synthetic lesion, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub label: u8,
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    /// `(amplitude, phase)` of boundary harmonics 3, 4 and 5.
    pub harmonics: [(f64, f64); 3],
    pub skin: [f32; 3],
    pub lesion: [f32; 3],
}

impl SynthParams {
    pub fn draw(label: u8, size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let mel = label == 1;
        let (lo, hi) = if mel { (0.22, 0.32) } else { (0.12, 0.20) };
        let a = rng.gen_range(lo..hi) * s;
        let b = a * rng.gen_range(0.65..1.0);
        let margin = 0.3 * s;
        let center = (
            rng.gen_range(margin..s - margin),
            rng.gen_range(margin..s - margin),
        );
        let angle = rng.gen_range(0.0..PI);
        let harmonics = std::array::from_fn(|_| {
            let amp = if mel { rng.gen_range(0.06..0.14) } else { 0.0 };
            (amp, rng.gen_range(0.0..2.0 * PI))
        });
        let tone = rng.gen_range(-0.06f32..0.06);
        let skin = [0.86 + tone, 0.66 + tone, 0.56 + tone];
        let dark = if mel {
            rng.gen_range(0.18f32..0.30)
        } else {
            rng.gen_range(0.45f32..0.58)
        };
        let lesion = [dark + 0.08, dark * 0.72, dark * 0.6];
        SynthParams {
            label,
            center,
            semi_axes: (a, b),
            angle,
            harmonics,
            skin,
            lesion,
        }
    }

    /// Whether pixel centre `(x, y)` lies inside the lesion.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.semi_axes.0;
        let v = (-s * dx + c * dy) / self.semi_axes.1;
        let theta = v.atan2(u);
        let boundary = 1.0
            + self
                .harmonics
                .iter()
                .zip(3..)
                .map(|(&(a, p), k)| a * (k as f64 * theta + p).cos())
                .sum::<f64>();
        (u * u + v * v).sqrt() <= boundary
    }

    /// Renders `(pixels, mask)`; `rng` supplies the pixel texture.
    pub fn render(&self, size: usize, rng: &mut impl Rng) -> (Image, Image) {
        let mut pixels = Vec::with_capacity(size * size * 3);
        let mut mask = Vec::with_capacity(size * size);
        let freq = 2.0 * PI / size as f64;
        for y in 0..size {
            for x in 0..size {
                let inside = self.contains(x as f64, y as f64);
                mask.push(if inside { 1.0 } else { 0.0 });
                let base = if inside { self.lesion } else { self.skin };
                let shade =
                    0.03 * ((x as f64 * freq * 1.3).sin() * (y as f64 * freq * 0.9).cos()) as f32;
                let grain: f32 = rng.gen_range(-0.03..0.03);
                pixels.extend(base.iter().map(|&v| (v + shade + grain).clamp(0.0, 1.0)));
            }
        }
        if !mask.contains(&1.0) {
            let cx = (self.center.0.round() as usize).min(size - 1);
            let cy = (self.center.1.round() as usize).min(size - 1);
            let i = cy * size + cx;
            mask[i] = 1.0;
            pixels[i * 3..i * 3 + 3].copy_from_slice(&self.lesion);
        }
        (
            Image {
                height: size,
                width: size,
                channels: 3,
                data: pixels,
            },
            Image {
                height: size,
                width: size,
                channels: 1,
                data: mask,
            },
        )
    }
}

/// Generates `n` square skin images with one lesion each. Sample `i` has
/// label `i % 2`; melanoma lesions are larger, darker and irregular.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if n == 0 || n % 2 == 1 || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic set needs an even n >= 2 and size >= 1, got n={n} size={size}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut rng = stream(seed, "synth", i as u64);
            let params = SynthParams::draw(label, size, &mut rng);
            let (pixels, mask) = params.render(size, &mut rng);
            let mut s = ImageSample::new(format!("synth_{i:05}"), pixels, Source::Synthetic)
                .with_label(label);
            s.mask = Some(mask);
            s.lesion_type = Some(if label == 1 { "mel" } else { "nv" }.to_string());
            s
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_samples_one_per_class() {
        let set = synth_generate(2, 32, 1).unwrap();
        assert_eq!(
            set.iter().map(|s| s.label.unwrap()).collect::<Vec<_>>(),
            [0, 1]
        );
        for s in &set {
            let m = s.mask.as_ref().unwrap();
            assert!(m.data.contains(&1.0));
            assert!(s.pixels.in_unit_range() && m.in_unit_range());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(
            synth_generate(6, 24, 9).unwrap(),
            synth_generate(6, 24, 9).unwrap()
        );
        assert_ne!(
            synth_generate(2, 24, 9).unwrap(),
            synth_generate(2, 24, 10).unwrap()
        );
    }

    #[test]
    fn rejects_empty_odd_or_zero_size() {
        for (n, size) in [(0, 8), (3, 8), (2, 0)] {
            assert!(synth_generate(n, size, 0).is_err());
        }
    }

    #[test]
    fn masked_intensity_separates_classes() {
        let set = synth_generate(200, 32, 4).unwrap();
        let stat = |s: &ImageSample| {
            let m = s.mask.as_ref().unwrap();
            let (mut sum, mut count) = (0.0, 0.0);
            for (p, &mv) in m.data.iter().enumerate() {
                if mv > 0.5 {
                    sum += s.pixels.data[p * 3..p * 3 + 3].iter().sum::<f32>() / 3.0;
                    count += 1.0;
                }
            }
            sum / count
        };
        let stats: Vec<(f32, u8)> = set.iter().map(|s| (stat(s), s.label.unwrap())).collect();
        let mean = |l| stats.iter().filter(|s| s.1 == l).map(|s| s.0).sum::<f32>() / 100.0;
        assert!(mean(1) < mean(0));
        let best = stats
            .iter()
            .map(|&(t, _)| stats.iter().filter(|&&(v, l)| (v <= t) == (l == 1)).count())
            .max()
            .unwrap();
        assert!(best as f64 / 200.0 >= 0.9, "{best}");
    }

    #[test]
    fn tiny_images_still_have_a_lesion() {
        for s in synth_generate(4, 2, 0).unwrap() {
            assert!(s.mask.unwrap().data.contains(&1.0));
        }
    }
}
