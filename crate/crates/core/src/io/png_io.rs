use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CrackMask, RasterImage};
use crate::error::{Error, Result};
use crate::inference::{BinaryPrediction, ProbabilityMap};

/// An 8-bit PNG after palette/low-bit expansion.
#[derive(Clone, Debug)]
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    /// 1 gray, 2 gray+alpha, 3 RGB, 4 RGBA.
    pub samples: usize,
    pub data: Vec<u8>,
}

impl DecodedPng {
    /// Color channels with any alpha channel dropped.
    fn color(&self) -> (usize, Vec<u8>) {
        match self.samples {
            1 | 3 => (self.samples, self.data.clone()),
            2 => (1, self.data.chunks_exact(2).map(|p| p[0]).collect()),
            _ => (
                3,
                self.data
                    .chunks_exact(4)
                    .flat_map(|p| [p[0], p[1], p[2]])
                    .collect(),
            ),
        }
    }
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_png(path: &Path) -> Result<DecodedPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| image_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(
            path,
            format!(
                "unsupported bit depth {:?}; only 8-bit PNG is read",
                info.bit_depth
            ),
        ));
    }
    let samples = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    // line_size may include no padding for 8-bit data; keep rows dense
    if buf.len() != width * height * samples {
        return Err(image_err(path, "unexpected decoded buffer size"));
    }
    Ok(DecodedPng {
        width,
        height,
        samples,
        data: buf,
    })
}

/// Loads an 8-bit gray or RGB PNG and maps it to `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<RasterImage> {
    let png = read_png(path)?;
    let (channels, data) = png.color();
    let mut image = RasterImage::from_u8(png.height, png.width, channels, &data)?;
    image.source_path = Some(path.to_path_buf());
    Ok(image)
}

/// Loads a ground-truth PNG; pixels brighter than 127 are cracks. RGB masks
/// are reduced to their brightest channel.
pub fn load_mask(path: &Path) -> Result<CrackMask> {
    let png = read_png(path)?;
    let (channels, data) = png.color();
    let gray: Vec<u8> = data
        .chunks_exact(channels)
        .map(|p| p.iter().copied().max().unwrap_or(0))
        .collect();
    CrackMask::from_gray(png.height, png.width, &gray)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| image_err(path, e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| image_err(path, e.to_string()))?;
    writer.finish().map_err(|e| image_err(path, e.to_string()))
}

pub fn write_image_png(image: &RasterImage, path: &Path) -> Result<()> {
    let color = if image.channels() == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    };
    write_png(path, image.width(), image.height(), color, &image.to_u8())
}

pub fn write_mask_png(mask: &CrackMask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    write_png(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        &data,
    )
}

/// Quantizes `[0, 1]` values to 8-bit gray (`round(p·255)`, halves up).
pub fn save_unit_png(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{width}×{height} map needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let mut data = Vec::with_capacity(values.len());
    for &p in values {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("value {p} outside [0, 1]")));
        }
        data.push((p as f64 * 255.0 + 0.5).floor() as u8);
    }
    write_png(path, width, height, png::ColorType::Grayscale, &data)
}

pub fn save_probability_map(map: &ProbabilityMap, path: &Path) -> Result<()> {
    save_unit_png(path, map.width(), map.height(), map.values())
}

pub fn save_binary_mask(mask: &BinaryPrediction, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    write_png(
        path,
        mask.width(),
        mask.height(),
        png::ColorType::Grayscale,
        &data,
    )
}

const RAW_MAGIC: &[u8; 4] = b"CRKR";

/// Loss-free dump: `"CRKR"`, u32 height, u32 width, then little-endian f32
/// values in row-major order.
pub fn save_raw_grid(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch("raw grid size mismatch".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(RAW_MAGIC)?;
    write(&(height as u32).to_le_bytes())?;
    write(&(width as u32).to_le_bytes())?;
    for v in values {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a grid written by [`save_raw_grid`]: `(width, height, values)`.
pub fn load_raw_grid(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
        return Err(image_err(path, "not a raw probability grid"));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != width * height * 4 {
        return Err(image_err(path, "raw grid truncated"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, values))
}
