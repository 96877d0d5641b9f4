//! Patch extraction, imbalance-controlled sampling and batching.
//!
//! A training sample is a `(2h+1)×(2h+1)×C` window centred on one pixel,
//! labelled with the `s×s` ground-truth window around the same pixel. The
//! sample is positive when the centre pixel is a crack pixel.

mod batch;
mod sampling;
mod synthetic;

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{pad_symmetric, reflect, CrackMask, RasterImage};

pub use batch::{batch_iterator, BatchSchedule};
pub use sampling::{build_training_set, Ratio, SampleRef, SamplingPolicy, TrainingSet};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

/// Input half-width `h` and output structure side `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGeometry {
    pub half_width: usize,
    pub structure: usize,
}

impl PatchGeometry {
    pub fn new(half_width: usize, structure: usize) -> Result<Self> {
        if structure == 0 || structure.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "structure size s={structure} must be odd"
            )));
        }
        if structure > 2 * half_width + 1 {
            return Err(Error::InvalidArgument(format!(
                "structure size s={structure} exceeds patch side {}",
                2 * half_width + 1
            )));
        }
        Ok(Self {
            half_width,
            structure,
        })
    }

    pub fn patch_side(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn label_len(&self) -> usize {
        self.structure * self.structure
    }

    pub fn structure_radius(&self) -> usize {
        self.structure / 2
    }
}

impl Default for PatchGeometry {
    /// 27×27 patches with a 5×5 output structure.
    fn default() -> Self {
        Self {
            half_width: 13,
            structure: 5,
        }
    }
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub stem: String,
    pub image: RasterImage,
    pub mask: CrackMask,
}

impl LabeledImage {
    pub fn new(stem: impl Into<String>, image: RasterImage, mask: CrackMask) -> Result<Self> {
        let stem = stem.into();
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Data(format!(
                "{stem}: image is {}×{}, mask is {}×{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { stem, image, mask })
    }
}

/// A materialized training example.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `(2h+1)×(2h+1)×C`, row-major.
    pub pixels: Vec<f32>,
    /// `s×s` row-major binary window.
    pub labels: Vec<u8>,
    /// `(x, y)` in the unpadded image.
    pub center: (usize, usize),
    pub positive: bool,
}

/// Anything that can fill training batches by sample index.
pub trait SampleSource: Sync {
    fn sample_count(&self) -> usize;
    fn input_len(&self) -> usize;
    fn label_len(&self) -> usize;
    fn fill_batch<T: Copy + From<f32> + From<u8>>(
        &self,
        indices: &[usize],
        inputs: &mut [T],
        labels: &mut [T],
    ) -> Result<()>;
}

impl SampleSource for TrainingSet {
    fn sample_count(&self) -> usize {
        self.len()
    }

    fn input_len(&self) -> usize {
        TrainingSet::input_len(self)
    }

    fn label_len(&self) -> usize {
        self.geometry().label_len()
    }

    fn fill_batch<T: Copy + From<f32> + From<u8>>(
        &self,
        indices: &[usize],
        inputs: &mut [T],
        labels: &mut [T],
    ) -> Result<()> {
        TrainingSet::fill_batch(self, indices, inputs, labels)
    }
}

impl SampleSource for [PatchSample] {
    fn sample_count(&self) -> usize {
        self.len()
    }

    fn input_len(&self) -> usize {
        self.first().map_or(0, |s| s.pixels.len())
    }

    fn label_len(&self) -> usize {
        self.first().map_or(0, |s| s.labels.len())
    }

    fn fill_batch<T: Copy + From<f32> + From<u8>>(
        &self,
        indices: &[usize],
        inputs: &mut [T],
        labels: &mut [T],
    ) -> Result<()> {
        let (il, ll) = (SampleSource::input_len(self), SampleSource::label_len(self));
        if inputs.len() != indices.len() * il || labels.len() != indices.len() * ll {
            return Err(Error::ShapeMismatch(
                "batch buffers have the wrong size".into(),
            ));
        }
        for (k, &i) in indices.iter().enumerate() {
            let s = self
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {i} out of range")))?;
            if s.pixels.len() != il || s.labels.len() != ll {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i} has a different size"
                )));
            }
            for (d, &v) in inputs[k * il..(k + 1) * il].iter_mut().zip(&s.pixels) {
                *d = T::from(v);
            }
            for (d, &v) in labels[k * ll..(k + 1) * ll].iter_mut().zip(&s.labels) {
                *d = T::from(v);
            }
        }
        Ok(())
    }
}

/// Copies the `(2h+1)²` window centred on `(x, y)` out of an image that was
/// already padded by `h`.
pub fn extract_patch(
    padded: &RasterImage,
    x: usize,
    y: usize,
    geometry: PatchGeometry,
) -> Result<Vec<f32>> {
    let mut out = vec![0.0; geometry.patch_side().pow(2) * padded.channels()];
    extract_patch_into(padded, x, y, geometry, &mut out)?;
    Ok(out)
}

pub(crate) fn extract_patch_into<T: Copy + From<f32>>(
    padded: &RasterImage,
    x: usize,
    y: usize,
    geometry: PatchGeometry,
    out: &mut [T],
) -> Result<()> {
    let side = geometry.patch_side();
    let c = padded.channels();
    let inner_w = padded.width().checked_sub(2 * geometry.half_width);
    let inner_h = padded.height().checked_sub(2 * geometry.half_width);
    match (inner_w, inner_h) {
        (Some(w), Some(h)) if x < w && y < h => {}
        _ => {
            return Err(Error::InvalidArgument(format!(
                "centre ({x}, {y}) outside the unpadded image"
            )))
        }
    }
    let row_len = side * c;
    let values = padded.values();
    for dy in 0..side {
        let src = ((y + dy) * padded.width() + x) * c;
        for (d, &s) in out[dy * row_len..(dy + 1) * row_len]
            .iter_mut()
            .zip(&values[src..src + row_len])
        {
            *d = T::from(s);
        }
    }
    Ok(())
}

/// Row-major `s×s` label window centred on `(x, y)`. Cells beyond the image
/// border are mirrored back inside, matching the image padding.
pub fn label_window(mask: &CrackMask, x: usize, y: usize, s: usize) -> Result<Vec<u8>> {
    let mut out = vec![0u8; s * s];
    label_window_into(mask, x, y, s, &mut out)?;
    Ok(out)
}

pub(crate) fn label_window_into<T: From<u8>>(
    mask: &CrackMask,
    x: usize,
    y: usize,
    s: usize,
    out: &mut [T],
) -> Result<()> {
    if x >= mask.width() || y >= mask.height() {
        return Err(Error::InvalidArgument(format!(
            "centre ({x}, {y}) outside the {}×{} mask",
            mask.width(),
            mask.height()
        )));
    }
    let r = (s / 2) as isize;
    let values = mask.values();
    let mut i = 0;
    for dy in -r..=r {
        let yy = reflect(y as isize + dy, mask.height());
        for dx in -r..=r {
            let xx = reflect(x as isize + dx, mask.width());
            out[i] = T::from(values[yy * mask.width() + xx]);
            i += 1;
        }
    }
    Ok(())
}

/// Every pixel of one image as an (unlabelled) inference centre, in
/// row-major order.
#[derive(Clone, Debug)]
pub struct TestSet {
    padded: RasterImage,
    geometry: PatchGeometry,
    height: usize,
    width: usize,
}

pub fn build_test_set(image: &RasterImage, geometry: PatchGeometry) -> Result<TestSet> {
    Ok(TestSet {
        padded: pad_symmetric(image, geometry.half_width)?,
        geometry,
        height: image.height(),
        width: image.width(),
    })
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.padded.channels()
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn center(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }

    pub fn centers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(|i| self.center(i))
    }

    pub fn patch(&self, i: usize) -> Result<Vec<f32>> {
        let (x, y) = self.center(i);
        extract_patch(&self.padded, x, y, self.geometry)
    }

    /// Writes the patches of centres `range` contiguously into `out`.
    pub(crate) fn fill_patches<T: Copy + From<f32>>(
        &self,
        range: std::ops::Range<usize>,
        out: &mut [T],
    ) -> Result<()> {
        let stride = self.geometry.patch_side().pow(2) * self.channels();
        for (k, i) in range.enumerate() {
            let (x, y) = self.center(i);
            extract_patch_into(
                &self.padded,
                x,
                y,
                self.geometry,
                &mut out[k * stride..(k + 1) * stride],
            )?;
        }
        Ok(())
    }
}

/// Text sidecar listing every sample: `stem x y polarity` per line.
pub fn write_sample_index(set: &TrainingSet, path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in set.samples() {
        writeln!(
            w,
            "{} {} {} {}",
            set.stem(s.image as usize),
            s.x,
            s.y,
            u8::from(s.positive)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> RasterImage {
        let values = (0..h * w).map(|i| (i % 200) as f32 / 100.0 - 1.0).collect();
        RasterImage::new(h, w, 1, values).unwrap()
    }

    #[test]
    fn geometry_rules() {
        assert!(PatchGeometry::new(13, 4).is_err());
        assert!(PatchGeometry::new(1, 5).is_err());
        let g = PatchGeometry::default();
        assert_eq!((g.patch_side(), g.label_len()), (27, 25));
    }

    #[test]
    fn patch_sizes() {
        let img = ramp(40, 40);
        let g = PatchGeometry::new(13, 5).unwrap();
        let padded = pad_symmetric(&img, 13).unwrap();
        assert_eq!(extract_patch(&padded, 20, 20, g).unwrap().len(), 27 * 27);
        let g0 = PatchGeometry::new(0, 1).unwrap();
        assert_eq!(
            extract_patch(&img, 7, 3, g0).unwrap(),
            img.pixel(7, 3).to_vec()
        );
        assert!(extract_patch(&padded, 40, 0, g).is_err());
    }

    #[test]
    fn corner_patch_uses_only_image_values() {
        let img = ramp(30, 30);
        let g = PatchGeometry::default();
        let padded = pad_symmetric(&img, 13).unwrap();
        let patch = extract_patch(&padded, 0, 0, g).unwrap();
        assert!(patch.iter().all(|v| img.values().contains(v)));
        // centre of the window is the pixel itself
        assert_eq!(patch[13 * 27 + 13], img.pixel(0, 0)[0]);
    }

    #[test]
    fn label_windows() {
        let full = CrackMask::new(9, 9, vec![1; 81]).unwrap();
        assert_eq!(label_window(&full, 4, 4, 5).unwrap(), vec![1; 25]);
        let mut dot = CrackMask::empty(9, 9);
        dot.set(4, 4, true);
        let w = label_window(&dot, 4, 4, 5).unwrap();
        assert_eq!(w.iter().filter(|&&v| v == 1).count(), 1);
        assert_eq!(w[12], 1);
        assert_eq!(label_window(&dot, 4, 4, 1).unwrap(), vec![1]);
        assert_eq!(label_window(&dot, 3, 4, 1).unwrap(), vec![0]);
    }

    #[test]
    fn border_labels_mirror() {
        let mut m = CrackMask::empty(5, 5);
        m.set(0, 0, true);
        // window at the corner sees the crack pixel 4 times (itself plus
        // its mirror images across both edges)
        let w = label_window(&m, 0, 0, 3).unwrap();
        assert_eq!(w, vec![1, 1, 0, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn test_set_counts() {
        let img = RasterImage::new(320, 480, 3, vec![0.0; 320 * 480 * 3]).unwrap();
        assert_eq!(
            build_test_set(&img, PatchGeometry::default())
                .unwrap()
                .len(),
            153_600
        );
        let one = RasterImage::new(1, 1, 1, vec![0.5]).unwrap();
        let t = build_test_set(&one, PatchGeometry::new(0, 1).unwrap()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.patch(0).unwrap(), vec![0.5]);
    }

    #[test]
    fn test_set_enumerates_row_major() {
        let img = ramp(6, 7);
        let t = build_test_set(&img, PatchGeometry::new(2, 3).unwrap()).unwrap();
        let centers: Vec<_> = t.centers().collect();
        assert_eq!(centers.len(), 42);
        assert_eq!(centers[0], (0, 0));
        assert_eq!(centers[8], (1, 1));
        let mut sorted = centers.clone();
        sorted.sort_by_key(|&(x, y)| (y, x));
        sorted.dedup();
        assert_eq!(sorted, centers);
    }
}
