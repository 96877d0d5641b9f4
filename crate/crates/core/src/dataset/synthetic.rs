//! Stand-in pavement corpus: textured gray background with dark crack
//! curves drawn as correlated random walks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::io::{CrackMask, RasterImage};
use crate::rng::{stream, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// 1 (gray) or 3 (RGB with a slight per-channel tint).
    pub channels: usize,
    /// Mean background intensity in `[0, 1]`.
    pub background: f64,
    /// Standard deviation of per-pixel noise, intensity units.
    pub noise_amplitude: f64,
    /// Amplitude of the smooth large-scale shading.
    pub shading_amplitude: f64,
    /// Inclusive range of cracks per image.
    pub crack_count: (usize, usize),
    /// Peak darkening at the crack centre line.
    pub contrast: f64,
    /// Walk step length in pixels.
    pub step_length: f64,
    /// Standard deviation of the heading change per step, radians.
    pub turn_std: f64,
    /// Inclusive range of walk lengths in steps.
    pub walk_steps: (usize, usize),
    /// Crack width range in pixels.
    pub width_range: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            channels: 1,
            background: 0.62,
            noise_amplitude: 0.10,
            shading_amplitude: 0.06,
            crack_count: (1, 3),
            contrast: 0.16,
            step_length: 1.5,
            turn_std: 0.18,
            walk_steps: (40, 90),
            width_range: (1.0, 2.5),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("empty image size");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        if self.contrast <= self.noise_amplitude {
            return bad("contrast must exceed the noise amplitude");
        }
        if self.crack_count.0 > self.crack_count.1 || self.walk_steps.0 > self.walk_steps.1 {
            return bad("empty range");
        }
        if !(self.width_range.0 > 0.0 && self.width_range.0 <= self.width_range.1) {
            return bad("crack width range");
        }
        if self.step_length <= 0.0 || self.turn_std < 0.0 || self.noise_amplitude < 0.0 {
            return bad("walk or noise parameters");
        }
        Ok(())
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn generate_one(spec: &SyntheticSpec, seed: u64, index: usize) -> Result<LabeledImage> {
    let mut rng = stream(seed, &[tag::SYNTHETIC, index as u64]);
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise_amplitude.max(1e-12))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let turn = Normal::new(0.0, spec.turn_std.max(1e-12))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    // smooth shading from a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.01..0.05);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (angle, freq, phase)
        })
        .collect();
    let mut intensity = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let shade: f64 = waves
                .iter()
                .map(|&(a, f, ph)| ((x as f64 * a.cos() + y as f64 * a.sin()) * f + ph).sin())
                .sum::<f64>()
                / 3.0;
            intensity[y * w + x] =
                spec.background + spec.shading_amplitude * shade + noise.sample(&mut rng);
        }
    }

    // nearest distance to any crack centre line, and the width of that crack
    let mut nearest = vec![(f64::INFINITY, 0.0f64); h * w];
    let cracks = rng.random_range(spec.crack_count.0..=spec.crack_count.1);
    for _ in 0..cracks {
        let width = rng.random_range(spec.width_range.0..=spec.width_range.1);
        let steps = rng.random_range(spec.walk_steps.0..=spec.walk_steps.1);
        let mut p = (
            rng.random_range(0.0..w as f64),
            rng.random_range(0.0..h as f64),
        );
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let reach = (width * 2.0).ceil() as isize + 1;
        for _ in 0..steps {
            heading += turn.sample(&mut rng);
            let q = (
                p.0 + spec.step_length * heading.cos(),
                p.1 + spec.step_length * heading.sin(),
            );
            let x0 = (p.0.min(q.0).floor() as isize - reach).max(0);
            let x1 = (p.0.max(q.0).ceil() as isize + reach).min(w as isize - 1);
            let y0 = (p.1.min(q.1).floor() as isize - reach).max(0);
            let y1 = (p.1.max(q.1).ceil() as isize + reach).min(h as isize - 1);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let d = segment_distance((xx as f64, yy as f64), p, q);
                    let cell = &mut nearest[yy as usize * w + xx as usize];
                    if d < cell.0 {
                        *cell = (d, width);
                    }
                }
            }
            p = q;
        }
    }

    let mut mask = vec![0u8; h * w];
    for (i, &(d, width)) in nearest.iter().enumerate() {
        if d.is_finite() {
            let sigma = width / 2.0;
            intensity[i] -= spec.contrast * (-(d * d) / (2.0 * sigma * sigma)).exp();
            if d <= width / 2.0 {
                mask[i] = 1;
            }
        }
    }

    let tint: [f64; 3] = [1.0, 0.97, 0.93];
    let raw: Vec<u8> = if spec.channels == 1 {
        intensity
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    } else {
        intensity
            .iter()
            .flat_map(|&v| tint.map(|t| ((v * t).clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    };
    LabeledImage::new(
        format!("syn{index:04}"),
        RasterImage::from_u8(h, w, spec.channels, &raw)?,
        CrackMask::new(h, w, mask)?,
    )
}

/// Generates `n_images` labelled images; image `i` depends only on
/// `(spec, seed, i)`.
pub fn generate_synthetic_corpus(
    spec: &SyntheticSpec,
    n_images: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    (0..n_images)
        .into_par_iter()
        .map(|i| generate_one(spec, seed, i))
        .collect()
}
