//! Raster types, normalization, symmetric padding and on-disk formats.

mod checkpoint;
mod dataset_dir;
mod png_io;

use std::path::PathBuf;

use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use dataset_dir::{
    list_image_stems, load_corpus, load_labeled, read_manifest, write_manifest, Manifest,
};
pub use png_io::{
    load_image, load_mask, load_raw_grid, read_png, save_binary_mask, save_probability_map,
    save_raw_grid, save_unit_png, write_image_png, write_mask_png, DecodedPng,
};

/// Maps an 8-bit intensity to `[-1, 1]`.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_u8`].
pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An image in normalized value space, `H×W×C` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    pub source_path: Option<PathBuf>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}×{width}×{channels} image needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            source_path: None,
        })
    }

    /// Builds an image from raw 8-bit samples, normalizing each to `[-1, 1]`.
    pub fn from_u8(height: usize, width: usize, channels: usize, raw: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            raw.iter().map(|&v| normalize_u8(v)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.values[i..i + self.channels]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| denormalize(v)).collect()
    }

    /// Converts between gray and RGB: RGB→gray uses luma
    /// `0.299R + 0.587G + 0.114B`, gray→RGB replicates the channel.
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        let values = match (self.channels, channels) {
            (a, b) if a == b => return Ok(self.clone()),
            (3, 1) => self
                .values
                .chunks_exact(3)
                .map(|p| {
                    let luma = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                    (luma as f32).clamp(-1.0, 1.0)
                })
                .collect(),
            (1, 3) => self.values.iter().flat_map(|&v| [v, v, v]).collect(),
            (_, c) => {
                return Err(Error::InvalidArgument(format!(
                    "cannot convert to {c} channels"
                )))
            }
        };
        let mut out = Self::new(self.height, self.width, channels, values)?;
        out.source_path = self.source_path.clone();
        Ok(out)
    }
}

/// Binary ground truth: 1 = crack, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrackMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl CrackMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    /// Thresholds 8-bit gray values: `> 127` is crack.
    pub fn from_gray(height: usize, width: usize, gray: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            gray.iter().map(|&v| u8::from(v > 127)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, crack: bool) {
        self.values[y * self.width + x] = u8::from(crack);
    }

    pub fn count_positive(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn pad_symmetric(&self, h: usize) -> Result<CrackMask> {
        let values = pad_grid(&self.values, self.height, self.width, 1, h)?;
        Ok(CrackMask {
            height: self.height + 2 * h,
            width: self.width + 2 * h,
            values,
        })
    }
}

/// Edge-inclusive mirror index: `-1 → 0`, `-2 → 1`, `n → n-1`. Offsets
/// beyond one image extent keep reflecting back and forth.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn pad_grid<T: Copy>(
    values: &[T],
    height: usize,
    width: usize,
    channels: usize,
    h: usize,
) -> Result<Vec<T>> {
    if h > 0 && h >= height.min(width) {
        return Err(Error::InvalidArgument(format!(
            "padding {h} must be smaller than the image extent {height}×{width}"
        )));
    }
    let (ph, pw) = (height + 2 * h, width + 2 * h);
    let mut out = Vec::with_capacity(ph * pw * channels);
    for py in 0..ph {
        let sy = reflect(py as isize - h as isize, height);
        for px in 0..pw {
            let sx = reflect(px as isize - h as isize, width);
            let i = (sy * width + sx) * channels;
            out.extend_from_slice(&values[i..i + channels]);
        }
    }
    Ok(out)
}

/// Extends the image by `h` pixels on every side with edge-inclusive
/// mirror reflection (`[a, b, c]` → `b a | a b c | c b`).
pub fn pad_symmetric(image: &RasterImage, h: usize) -> Result<RasterImage> {
    let values = pad_grid(&image.values, image.height, image.width, image.channels, h)?;
    Ok(RasterImage {
        height: image.height + 2 * h,
        width: image.width + 2 * h,
        channels: image.channels,
        values,
        source_path: image.source_path.clone(),
    })
}
