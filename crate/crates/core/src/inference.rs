//! Whole-image prediction by sliding the network over every pixel and
//! averaging the overlapping `s×s` output windows.

use rayon::prelude::*;

use crate::dataset::build_test_set;
use crate::error::{Error, Result};
use crate::io::{CrackMask, RasterImage};
use crate::network::ModelParams;
use crate::tensor::Tensor;

pub const DEFAULT_BATCH: usize = 1024;
/// Rows of centres per parallel work unit.
const BAND_ROWS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormMode {
    /// Per-pixel mean of the received votes.
    #[default]
    Mean,
    /// Mean map min-max rescaled over the image.
    Global,
}

impl NormMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "global" => Ok(Self::Global),
            other => Err(Error::InvalidArgument(format!(
                "normalization mode {other:?} (expected mean or global)"
            ))),
        }
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Global => "global",
        })
    }
}

/// Accumulated window outputs per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteMap {
    height: usize,
    width: usize,
    structure: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl VoteMap {
    pub fn new(height: usize, width: usize, structure: usize) -> Result<Self> {
        if structure.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("s={structure} must be odd")));
        }
        Ok(Self {
            height,
            width,
            structure,
            sum: vec![0.0; height * width],
            count: vec![0; height * width],
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn structure(&self) -> usize {
        self.structure
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn count(&self) -> &[u32] {
        &self.count
    }

    pub fn count_at(&self, x: usize, y: usize) -> u32 {
        self.count[y * self.width + x]
    }

    /// Adds the row-major `s×s` window predicted at centre `(x, y)`. Cells
    /// outside the image are dropped.
    pub fn add_window(&mut self, x: usize, y: usize, window: &[f32]) -> Result<()> {
        self.add_window_offset(x, y, window, 0)
    }

    /// Like `add_window` on a map that holds image rows starting at
    /// `row0`, clipped to this map's extent.
    fn add_window_offset(&mut self, x: usize, y: usize, window: &[f32], row0: usize) -> Result<()> {
        let s = self.structure;
        if window.len() != s * s {
            return Err(Error::ShapeMismatch(format!(
                "window has {} cells, expected {}",
                window.len(),
                s * s
            )));
        }
        let r = (s / 2) as isize;
        for dy in -r..=r {
            let yy = y as isize + dy - row0 as isize;
            if yy < 0 || yy >= self.height as isize {
                continue;
            }
            for dx in -r..=r {
                let xx = x as isize + dx;
                if xx < 0 || xx >= self.width as isize {
                    continue;
                }
                let i = yy as usize * self.width + xx as usize;
                self.sum[i] += window[((dy + r) as usize) * s + (dx + r) as usize] as f64;
                self.count[i] += 1;
            }
        }
        Ok(())
    }
}

/// Runs the model on every pixel centre of `image`, `batch_size` patches at
/// a time, and accumulates the output windows.
pub fn predict_image(
    model: &ModelParams<f32>,
    image: &RasterImage,
    batch_size: usize,
) -> Result<VoteMap> {
    if image.channels() != model.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{}: image has {} channels, model expects {}",
            image
                .source_path
                .as_ref()
                .map_or_else(|| "image".to_string(), |p| p.display().to_string()),
            image.channels(),
            model.channels()
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    let geometry = model.geometry();
    let set = build_test_set(image, geometry)?;
    let (h, w) = (image.height(), image.width());
    let s = geometry.structure;
    let r = s / 2;
    let side = geometry.patch_side();
    let per = model.input_len();

    // each band writes into a private map covering its rows plus the
    // window overhang; bands are merged in order afterwards
    let bands: Vec<(usize, VoteMap)> = (0..h.div_ceil(BAND_ROWS))
        .into_par_iter()
        .map(|b| {
            let y0 = b * BAND_ROWS;
            let y1 = (y0 + BAND_ROWS).min(h);
            let row0 = y0.saturating_sub(r);
            let rows = (y1 + r).min(h) - row0;
            let mut local = VoteMap::new(rows, w, s)?;
            let (start, end) = (y0 * w, y1 * w);
            let mut first = start;
            while first < end {
                let last = (first + batch_size).min(end);
                let n = last - first;
                let mut buf = vec![0.0f32; n * per];
                set.fill_patches(first..last, &mut buf)?;
                let x = Tensor::from_vec(&[n, side, side, model.channels()], buf)?;
                let out = model.predict(&x)?;
                for (k, window) in out.data().chunks(s * s).enumerate() {
                    let (cx, cy) = set.center(first + k);
                    local.add_window_offset(cx, cy, window, row0)?;
                }
                first = last;
            }
            Ok((row0, local))
        })
        .collect::<Result<_>>()?;

    let mut votes = VoteMap::new(h, w, s)?;
    for (row0, band) in bands {
        let offset = row0 * w;
        for (i, (&sum, &count)) in band.sum.iter().zip(&band.count).enumerate() {
            votes.sum[offset + i] += sum;
            votes.count[offset + i] += count;
        }
    }
    Ok(votes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    mode: NormMode,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, mode: NormMode) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}×{width} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            mode,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Turns votes into probabilities. A constant mean map has no range to
/// stretch, so global mode leaves it as is.
pub fn normalize_votes(votes: &VoteMap, mode: NormMode) -> Result<ProbabilityMap> {
    if let Some(i) = votes.count.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({}, {}) received no votes",
            i % votes.width.max(1),
            i / votes.width.max(1)
        )));
    }
    let mean: Vec<f64> = votes
        .sum
        .iter()
        .zip(&votes.count)
        .map(|(&s, &c)| (s / c as f64).clamp(0.0, 1.0))
        .collect();
    let values = match mode {
        NormMode::Mean => mean.iter().map(|&v| v as f32).collect(),
        NormMode::Global => {
            let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                mean.iter()
                    .map(|&v| ((v - lo) / (hi - lo)) as f32)
                    .collect()
            } else {
                mean.iter().map(|&v| v as f32).collect()
            }
        }
    };
    ProbabilityMap::new(votes.height, votes.width, values, mode)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryPrediction {
    height: usize,
    width: usize,
    values: Vec<u8>,
    threshold: f32,
}

impl BinaryPrediction {
    pub fn new(height: usize, width: usize, values: Vec<u8>, threshold: f32) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}×{width} mask",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(
                "prediction values must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
            threshold,
        })
    }

    /// A binary mask read back from disk, e.g. a saved prediction.
    pub fn from_mask(mask: &CrackMask, threshold: f32) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            values: mask.values().to_vec(),
            threshold,
        }
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

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn count_positive(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// `1` where the probability is at least `threshold`.
pub fn binarize(prob: &ProbabilityMap, threshold: f32) -> Result<BinaryPrediction> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let values = prob
        .values
        .iter()
        .map(|&p| u8::from(p >= threshold))
        .collect();
    BinaryPrediction::new(prob.height, prob.width, values, threshold)
}

/// Convenience: votes, normalization and thresholding in one call.
pub fn segment_image(
    model: &ModelParams<f32>,
    image: &RasterImage,
    mode: NormMode,
    threshold: f32,
) -> Result<(ProbabilityMap, BinaryPrediction)> {
    let votes = predict_image(model, image, DEFAULT_BATCH)?;
    let prob = normalize_votes(&votes, mode)?;
    let bin = binarize(&prob, threshold)?;
    Ok((prob, bin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PatchGeometry;
    use crate::network::{build_network, NetworkConfig};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_windows(h: usize, w: usize, s: usize, value: f32) -> VoteMap {
        let mut v = VoteMap::new(h, w, s).unwrap();
        for y in 0..h {
            for x in 0..w {
                v.add_window(x, y, &vec![value; s * s]).unwrap();
            }
        }
        v
    }

    #[test]
    fn counts_interior_and_corner() {
        let v = all_windows(20, 20, 5, 0.5);
        for y in 2..18 {
            for x in 2..18 {
                assert_eq!(v.count_at(x, y), 25);
            }
        }
        for (x, y) in [(0, 0), (19, 0), (0, 19), (19, 19)] {
            assert_eq!(v.count_at(x, y), 9);
        }
        assert_eq!(v.count_at(1, 0), 12);
        assert!(all_windows(7, 9, 1, 0.2).count().iter().all(|&c| c == 1));
    }

    #[test]
    fn count_total_matches_clipping() {
        // each axis contributes Σ_c |{cells of the window inside}|
        let (h, w, s) = (11usize, 13usize, 5usize);
        let v = all_windows(h, w, s, 0.1);
        let axis = |n: usize| -> u64 {
            let r = (s / 2) as isize;
            (0..n as isize)
                .map(|c| {
                    (-r..=r)
                        .filter(|d| (0..n as isize).contains(&(c + d)))
                        .count() as u64
                })
                .sum()
        };
        let total: u64 = v.count().iter().map(|&c| c as u64).sum();
        assert_eq!(total, axis(h) * axis(w));
    }

    #[test]
    fn constant_votes_normalize_to_constant() {
        let v = all_windows(6, 6, 3, 0.5);
        let mean = normalize_votes(&v, NormMode::Mean).unwrap();
        assert!(mean.values().iter().all(|&p| p == 0.5));
        let global = normalize_votes(&v, NormMode::Global).unwrap();
        assert!(global.values().iter().all(|&p| p == 0.5));
        assert!(binarize(&mean, 0.5)
            .unwrap()
            .values()
            .iter()
            .all(|&b| b == 1));
    }

    #[test]
    fn global_mode_stretches() {
        let mut v = VoteMap::new(1, 3, 1).unwrap();
        for (x, p) in [0.2f32, 0.3, 0.6].into_iter().enumerate() {
            v.add_window(x, 0, &[p]).unwrap();
        }
        let g = normalize_votes(&v, NormMode::Global).unwrap();
        assert_eq!(g.values()[0], 0.0);
        assert_eq!(g.values()[2], 1.0);
        assert!((g.values()[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn binarize_rules() {
        let p = ProbabilityMap::new(1, 3, vec![0.0, 0.49, 1.0], NormMode::Mean).unwrap();
        assert_eq!(binarize(&p, 0.0).unwrap().values(), &[1, 1, 1]);
        assert_eq!(binarize(&p, 0.5).unwrap().values(), &[0, 0, 1]);
        assert!(binarize(&p, 1.0 + 1e-6).is_err());
        assert!(binarize(&p, -0.1).is_err());
    }

    #[test]
    fn zero_counts_rejected() {
        let v = VoteMap::new(2, 2, 1).unwrap();
        assert!(normalize_votes(&v, NormMode::Mean).is_err());
    }

    #[test]
    fn order_of_centres_does_not_matter() {
        let (h, w, s) = (9, 10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let windows: Vec<Vec<f32>> = (0..h * w)
            .map(|_| (0..s * s).map(|_| rng.random()).collect())
            .collect();
        let mut a = VoteMap::new(h, w, s).unwrap();
        for (i, win) in windows.iter().enumerate() {
            a.add_window(i % w, i / w, win).unwrap();
        }
        let mut order: Vec<usize> = (0..h * w).collect();
        order.shuffle(&mut rng);
        let mut b = VoteMap::new(h, w, s).unwrap();
        for i in order {
            b.add_window(i % w, i / w, &windows[i]).unwrap();
        }
        assert_eq!(a.count(), b.count());
        for (x, y) in a.sum().iter().zip(b.sum()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    fn small_model(channels: usize, s: usize) -> ModelParams<f32> {
        build_network(
            &NetworkConfig {
                input_channels: channels,
                geometry: PatchGeometry::new(4, s).unwrap(),
                ..Default::default()
            },
            7,
        )
        .unwrap()
    }

    fn noise_image(h: usize, w: usize, c: usize, seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..h * w * c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        RasterImage::new(h, w, c, values).unwrap()
    }

    #[test]
    fn predict_image_matches_serial_reference() {
        let model = small_model(1, 3);
        let img = noise_image(19, 11, 1, 1);
        let votes = predict_image(&model, &img, 7).unwrap();
        let again = predict_image(&model, &img, 1024).unwrap();
        assert_eq!(votes, again);

        let set = build_test_set(&img, model.geometry()).unwrap();
        let mut reference = VoteMap::new(19, 11, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..set.len() {
            let (x, y) = set.center(i);
            let out = model
                .forward(&set.patch(i).unwrap(), false, 0.0, &mut rng)
                .unwrap();
            reference.add_window(x, y, &out).unwrap();
        }
        assert_eq!(votes.count(), reference.count());
        for (a, b) in votes.sum().iter().zip(reference.sum()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let model = small_model(3, 3);
        assert!(predict_image(&model, &noise_image(10, 10, 1, 0), 64).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mean_lies_within_received_votes(h in 1usize..9, w in 1usize..9, seed in 0u64..1000) {
            let s = 3;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = VoteMap::new(h, w, s).unwrap();
            let mut lo = vec![f32::INFINITY; h * w];
            let mut hi = vec![f32::NEG_INFINITY; h * w];
            for y in 0..h {
                for x in 0..w {
                    let win: Vec<f32> = (0..9).map(|_| rng.random()).collect();
                    v.add_window(x, y, &win).unwrap();
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (xx, yy) = (x as isize + dx, y as isize + dy);
                            if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                                let i = yy as usize * w + xx as usize;
                                let p = win[((dy + 1) * 3 + dx + 1) as usize];
                                lo[i] = lo[i].min(p);
                                hi[i] = hi[i].max(p);
                            }
                        }
                    }
                }
            }
            let m = normalize_votes(&v, NormMode::Mean).unwrap();
            for i in 0..h * w {
                prop_assert!(m.values()[i] >= lo[i] - 1e-6 && m.values()[i] <= hi[i] + 1e-6);
            }
        }
    }
}
