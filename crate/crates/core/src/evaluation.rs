//! Tolerance-aware precision, recall and F1.
//!
//! A predicted crack pixel is a true positive when some ground-truth crack
//! pixel lies within distance `d`; a ground-truth pixel is missed when no
//! predicted pixel lies within `d`. Precision is measured over predicted
//! pixels, recall over ground-truth pixels.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::BinaryPrediction;
use crate::io::CrackMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Euclidean,
    Chebyshev,
}

impl Metric {
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Self::Euclidean),
            "chebyshev" => Ok(Self::Chebyshev),
            other => Err(Error::InvalidArgument(format!(
                "distance metric {other:?} (expected euclidean or chebyshev)"
            ))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Chebyshev => "chebyshev",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tolerance {
    /// Largest accepted distance in pixels.
    pub distance: u32,
    pub metric: Metric,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            distance: 2,
            metric: Metric::Euclidean,
        }
    }
}

impl Tolerance {
    pub fn euclidean(distance: u32) -> Self {
        Self {
            distance,
            metric: Metric::Euclidean,
        }
    }

    pub fn chebyshev(distance: u32) -> Self {
        Self {
            distance,
            metric: Metric::Chebyshev,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Pool counts over images, then compute the metrics.
    Micro,
    /// Average per-image metrics.
    Macro,
    #[default]
    Both,
}

impl Aggregation {
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "micro" => Ok(Self::Micro),
            "macro" => Ok(Self::Macro),
            "both" => Ok(Self::Both),
            other => Err(Error::InvalidArgument(format!(
                "aggregation {other:?} (expected micro, macro or both)"
            ))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Micro => "micro",
            Self::Macro => "macro",
            Self::Both => "both",
        })
    }
}

/// Tolerant confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    /// Predicted pixels near some ground-truth pixel.
    pub tp: u64,
    /// Predicted pixels with no ground truth nearby.
    pub fp: u64,
    /// Ground-truth pixels with no prediction nearby.
    pub fn_: u64,
    /// Ground-truth pixels with a prediction nearby.
    pub gt_matched: u64,
}

impl Counts {
    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn ground_truth(&self) -> u64 {
        self.gt_matched + self.fn_
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.gt_matched += other.gt_matched;
    }

    /// Metrics with fixed conventions for empty sets: with no ground truth
    /// recall is 1; with no prediction precision is 1 only if the ground
    /// truth is empty too.
    pub fn scores(&self) -> Scores {
        let (pred, gt) = (self.predicted(), self.ground_truth());
        let precision = match (pred, gt) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => self.tp as f64 / pred as f64,
        };
        let recall = if gt == 0 {
            1.0
        } else {
            self.gt_matched as f64 / gt as f64
        };
        let f1 = if pred > 0 && gt == 0 {
            0.0
        } else {
            f1_score(precision, recall)
        };
        Scores {
            precision,
            recall,
            f1,
        }
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub stem: String,
    pub counts: Counts,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub counts: Counts,
    pub micro: Scores,
    pub macro_avg: Scores,
    pub per_image: Vec<ImageScore>,
    pub aggregation: Aggregation,
    pub tolerance: Tolerance,
}

impl EvalReport {
    /// The headline scores: macro when requested, micro otherwise.
    pub fn scores(&self) -> Scores {
        match self.aggregation {
            Aggregation::Macro => self.macro_avg,
            Aggregation::Micro | Aggregation::Both => self.micro,
        }
    }

    pub fn render_table(&self) -> String {
        let width = self
            .per_image
            .iter()
            .map(|s| s.stem.len())
            .max()
            .unwrap_or(0)
            .max(10);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>7}",
            "image", "Pr", "Re", "F1"
        );
        for s in &self.per_image {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}",
                s.stem, s.scores.precision, s.scores.recall, s.scores.f1
            );
        }
        for (name, sc, show) in [
            ("micro", self.micro, self.aggregation != Aggregation::Macro),
            (
                "macro",
                self.macro_avg,
                self.aggregation != Aggregation::Micro,
            ),
        ] {
            if show {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}",
                    format!("[{name}]"),
                    sc.precision,
                    sc.recall,
                    sc.f1
                );
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stem,precision,recall,f1,tp,fp,fn\n");
        for s in &self.per_image {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{},{}",
                s.stem,
                s.scores.precision,
                s.scores.recall,
                s.scores.f1,
                s.counts.tp,
                s.counts.fp,
                s.counts.fn_
            );
        }
        let c = self.counts;
        let _ = writeln!(
            out,
            "micro,{:.6},{:.6},{:.6},{},{},{}",
            self.micro.precision, self.micro.recall, self.micro.f1, c.tp, c.fp, c.fn_
        );
        let _ = writeln!(
            out,
            "macro,{:.6},{:.6},{:.6},,,",
            self.macro_avg.precision, self.macro_avg.recall, self.macro_avg.f1
        );
        out
    }

    pub fn write_files(&self, csv: &Path, table: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(table, self.render_table()).map_err(|e| Error::io(table, e))
    }
}

const FAR: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (lower envelope
/// of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let cross = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = cross(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel; `FAR` everywhere when nothing is set.
pub fn squared_distance_transform(height: usize, width: usize, set: &[u8]) -> Vec<f64> {
    let mut grid: Vec<f64> = set
        .iter()
        .map(|&v| if v != 0 { 0.0 } else { FAR })
        .collect();
    let n = height.max(width);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        dt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        dt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

/// Box dilation by `r` (Chebyshev ball), separable via running counts.
fn dilate_box(height: usize, width: usize, set: &[u8], r: usize) -> Vec<u8> {
    let pass = |src: &[u8], len: usize, stride: usize, lines: usize, step: usize| {
        let mut dst = vec![0u8; src.len()];
        for line in 0..lines {
            let base = line * step;
            let at = |i: usize| base + i * stride;
            let mut count = 0usize;
            for i in 0..len.min(r) {
                count += src[at(i)] as usize;
            }
            for i in 0..len {
                if i + r < len {
                    count += src[at(i + r)] as usize;
                }
                if i > r {
                    count -= src[at(i - r - 1)] as usize;
                }
                dst[at(i)] = u8::from(count > 0);
            }
        }
        dst
    };
    let set: Vec<u8> = set.iter().map(|&v| u8::from(v != 0)).collect();
    let rows = pass(&set, width, 1, height, width);
    pass(&rows, height, width, width, 1)
}

/// Marks pixels within tolerance of any set pixel.
fn near_set(height: usize, width: usize, set: &[u8], tol: Tolerance) -> Vec<bool> {
    match tol.metric {
        Metric::Euclidean => {
            let d2 = (tol.distance as f64).powi(2);
            squared_distance_transform(height, width, set)
                .into_iter()
                .map(|v| v <= d2)
                .collect()
        }
        Metric::Chebyshev => dilate_box(height, width, set, tol.distance as usize)
            .into_iter()
            .map(|v| v != 0)
            .collect(),
    }
}

/// Tolerant confusion counts between two binary rasters of equal size.
pub fn tolerant_counts(
    height: usize,
    width: usize,
    pred: &[u8],
    gt: &[u8],
    tol: Tolerance,
) -> Result<Counts> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} pixels, ground truth {}, expected {}",
            pred.len(),
            gt.len(),
            height * width
        )));
    }
    let near_gt = near_set(height, width, gt, tol);
    let near_pred = near_set(height, width, pred, tol);
    let mut c = Counts::default();
    for i in 0..pred.len() {
        if pred[i] != 0 {
            if near_gt[i] {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        if gt[i] != 0 {
            if near_pred[i] {
                c.gt_matched += 1;
            } else {
                c.fn_ += 1;
            }
        }
    }
    Ok(c)
}

fn check_dims(pred: &BinaryPrediction, gt: &CrackMask) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}×{}, ground truth {}×{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn image_score(
    stem: &str,
    pred: &BinaryPrediction,
    gt: &CrackMask,
    tol: Tolerance,
) -> Result<ImageScore> {
    check_dims(pred, gt)?;
    let counts = tolerant_counts(gt.height(), gt.width(), pred.values(), gt.values(), tol)?;
    Ok(ImageScore {
        stem: stem.to_string(),
        counts,
        scores: counts.scores(),
    })
}

fn report(
    per_image: Vec<ImageScore>,
    tolerance: Tolerance,
    aggregation: Aggregation,
) -> EvalReport {
    let mut counts = Counts::default();
    let mut sum = Scores::default();
    for s in &per_image {
        counts.add(&s.counts);
        sum.precision += s.scores.precision;
        sum.recall += s.scores.recall;
        sum.f1 += s.scores.f1;
    }
    let n = per_image.len().max(1) as f64;
    EvalReport {
        counts,
        micro: counts.scores(),
        macro_avg: Scores {
            precision: sum.precision / n,
            recall: sum.recall / n,
            f1: sum.f1 / n,
        },
        per_image,
        aggregation,
        tolerance,
    }
}

pub fn evaluate_pair(
    pred: &BinaryPrediction,
    gt: &CrackMask,
    tol: Tolerance,
) -> Result<EvalReport> {
    Ok(report(
        vec![image_score("", pred, gt, tol)?],
        tol,
        Aggregation::Both,
    ))
}

/// Evaluates `(stem, prediction, ground truth)` triples in parallel; the
/// report keeps the input order.
pub fn evaluate_corpus(
    pairs: &[(String, BinaryPrediction, CrackMask)],
    tol: Tolerance,
    aggregation: Aggregation,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let per_image = pairs
        .par_iter()
        .map(|(stem, p, g)| image_score(stem, p, g, tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(per_image, tol, aggregation))
}

/// Pixel accuracy of predicting "no crack" everywhere. An empty corpus
/// scores 1.
pub fn degenerate_accuracy(masks: &[CrackMask]) -> f64 {
    let total: usize = masks.iter().map(|m| m.values().len()).sum();
    if total == 0 {
        return 1.0;
    }
    let positives: usize = masks.iter().map(CrackMask::count_positive).sum();
    (total - positives) as f64 / total as f64
}
