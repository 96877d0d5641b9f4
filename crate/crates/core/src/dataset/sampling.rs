use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;

use super::{extract_patch_into, label_window_into, LabeledImage, PatchGeometry, PatchSample};
use crate::error::{Error, Result};
use crate::io::{pad_symmetric, CrackMask, RasterImage};
use crate::rng::{stream, tag};

/// Negative-to-positive sample ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ratio {
    /// `R = negatives / positives`.
    Fixed(f64),
    /// No rebalancing: pixels are drawn regardless of polarity.
    Natural,
}

impl Ratio {
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if t.eq_ignore_ascii_case("natural") {
            return Ok(Ratio::Natural);
        }
        let r: f64 = t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad ratio {text:?}")))?;
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidArgument(format!("ratio {r} must be > 0")));
        }
        Ok(Ratio::Fixed(r))
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ratio::Fixed(r) => write!(f, "{r}"),
            Ratio::Natural => f.write_str("natural"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPolicy {
    pub ratio: Ratio,
    /// Fixed total sample budget; positives and negatives are then both
    /// subsampled.
    pub total_cap: Option<usize>,
    pub seed: u64,
    /// Draw `round(R · positives_i)` negatives from each image instead of
    /// from the pooled negatives of all images.
    pub per_image: bool,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            ratio: Ratio::Fixed(3.0),
            total_cap: None,
            seed: 0,
            per_image: false,
        }
    }
}

/// Compact reference to one training centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub image: u32,
    pub x: u32,
    pub y: u32,
    pub positive: bool,
}

/// Training samples as centre references into padded copies of the corpus.
/// Patches are materialized on demand.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    geometry: PatchGeometry,
    channels: usize,
    stems: Vec<String>,
    padded: Vec<RasterImage>,
    masks: Vec<CrackMask>,
    samples: Vec<SampleRef>,
}

impl TrainingSet {
    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SampleRef] {
        &self.samples
    }

    pub fn stem(&self, image: usize) -> &str {
        &self.stems[image]
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn input_len(&self) -> usize {
        self.geometry.patch_side().pow(2) * self.channels
    }

    pub fn sample(&self, i: usize) -> Result<PatchSample> {
        let r = self.samples[i];
        let mut pixels = vec![0.0f32; self.input_len()];
        let mut labels = vec![0u8; self.geometry.label_len()];
        let x = (r.x as usize, r.y as usize);
        extract_patch_into(
            &self.padded[r.image as usize],
            x.0,
            x.1,
            self.geometry,
            &mut pixels,
        )?;
        label_window_into(
            &self.masks[r.image as usize],
            x.0,
            x.1,
            self.geometry.structure,
            &mut labels,
        )?;
        Ok(PatchSample {
            pixels,
            labels,
            center: (r.x as usize, r.y as usize),
            positive: r.positive,
        })
    }

    fn fill_one<T: Copy + From<f32> + From<u8>>(
        &self,
        r: SampleRef,
        pixels: &mut [T],
        labels: &mut [T],
    ) -> Result<()> {
        let (x, y) = (r.x as usize, r.y as usize);
        extract_patch_into(&self.padded[r.image as usize], x, y, self.geometry, pixels)?;
        label_window_into(
            &self.masks[r.image as usize],
            x,
            y,
            self.geometry.structure,
            labels,
        )
    }

    /// Writes the inputs and label windows of `indices` contiguously.
    pub fn fill_batch<T: Copy + From<f32> + From<u8>>(
        &self,
        indices: &[usize],
        inputs: &mut [T],
        labels: &mut [T],
    ) -> Result<()> {
        let (il, ll) = (self.input_len(), self.geometry.label_len());
        if inputs.len() != indices.len() * il || labels.len() != indices.len() * ll {
            return Err(Error::ShapeMismatch(
                "batch buffers have the wrong size".into(),
            ));
        }
        for (k, &i) in indices.iter().enumerate() {
            self.fill_one(
                self.samples[i],
                &mut inputs[k * il..(k + 1) * il],
                &mut labels[k * ll..(k + 1) * ll],
            )?;
        }
        Ok(())
    }
}

/// Picks `amount` distinct positions out of per-image lists pooled in
/// order, returning `(image, position within that image's list)`.
fn pick_pooled<R: Rng>(rng: &mut R, sizes: &[usize], amount: usize) -> Result<Vec<(usize, usize)>> {
    let total: usize = sizes.iter().sum();
    if amount > total {
        return Err(Error::Data(format!(
            "requested {amount} samples but only {total} are available"
        )));
    }
    let mut picked = index::sample(rng, total, amount).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(amount);
    let (mut image, mut base) = (0, 0);
    for p in picked {
        while p >= base + sizes[image] {
            base += sizes[image];
            image += 1;
        }
        out.push((image, p - base));
    }
    Ok(out)
}

fn check_policy(policy: &SamplingPolicy) -> Result<()> {
    if let Ratio::Fixed(r) = policy.ratio {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidArgument(format!("ratio R={r} must be > 0")));
        }
    }
    if policy.total_cap == Some(0) {
        return Err(Error::InvalidArgument(
            "total sample budget must be > 0".into(),
        ));
    }
    Ok(())
}

/// Builds the training set: every positive centre first, then negatives
/// drawn without replacement according to the ratio policy. The final order
/// is a seeded shuffle.
pub fn build_training_set(
    corpus: &[LabeledImage],
    geometry: PatchGeometry,
    policy: &SamplingPolicy,
) -> Result<TrainingSet> {
    check_policy(policy)?;
    let channels = match corpus.first() {
        Some(first) => first.image.channels(),
        None => return Err(Error::Data("empty training corpus".into())),
    };
    if let Some(bad) = corpus.iter().find(|c| c.image.channels() != channels) {
        return Err(Error::Data(format!(
            "{} has {} channels, corpus has {channels}",
            bad.stem,
            bad.image.channels()
        )));
    }
    let mut order: Vec<&LabeledImage> = corpus.iter().collect();
    order.sort_by(|a, b| a.stem.cmp(&b.stem));

    let prepared: Vec<(RasterImage, Vec<u32>, Vec<u32>)> = order
        .par_iter()
        .map(|li| {
            let padded = pad_symmetric(&li.image, geometry.half_width)?;
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (i, &v) in li.mask.values().iter().enumerate() {
                if v == 1 {
                    pos.push(i as u32)
                } else {
                    neg.push(i as u32)
                }
            }
            Ok((padded, pos, neg))
        })
        .collect::<Result<_>>()?;

    let pos_sizes: Vec<usize> = prepared.iter().map(|p| p.1.len()).collect();
    let neg_sizes: Vec<usize> = prepared.iter().map(|p| p.2.len()).collect();
    let n_pos: usize = pos_sizes.iter().sum();
    if n_pos == 0 {
        return Err(Error::Data("training corpus has no crack pixels".into()));
    }

    let mut rng = stream(policy.seed, &[tag::SAMPLING]);
    // (image, pixel index, positive)
    let mut chosen: Vec<(usize, u32, bool)> = Vec::new();
    let positive_at = |(i, k): (usize, usize)| (i, prepared[i].1[k], true);
    let negative_at = |(i, k): (usize, usize)| (i, prepared[i].2[k], false);

    match (policy.ratio, policy.total_cap) {
        (Ratio::Fixed(r), None) => {
            for (i, p) in prepared.iter().enumerate() {
                chosen.extend(p.1.iter().map(|&px| (i, px, true)));
            }
            if policy.per_image {
                for (i, p) in prepared.iter().enumerate() {
                    let want = ((r * p.1.len() as f64).round() as usize).min(p.2.len());
                    let mut img_rng = stream(policy.seed, &[tag::SAMPLING, i as u64]);
                    let mut picks = index::sample(&mut img_rng, p.2.len(), want).into_vec();
                    picks.sort_unstable();
                    chosen.extend(picks.into_iter().map(|k| negative_at((i, k))));
                }
            } else {
                let want = (r * n_pos as f64).round() as usize;
                let picks = pick_pooled(&mut rng, &neg_sizes, want)?;
                chosen.extend(picks.into_iter().map(negative_at));
            }
        }
        (Ratio::Fixed(r), Some(total)) => {
            let want_pos = (total as f64 / (1.0 + r)).round() as usize;
            let want_neg = total - want_pos.min(total);
            let picks = pick_pooled(&mut rng, &pos_sizes, want_pos)?;
            chosen.extend(picks.into_iter().map(positive_at));
            let picks = pick_pooled(&mut rng, &neg_sizes, want_neg)?;
            chosen.extend(picks.into_iter().map(negative_at));
        }
        (Ratio::Natural, cap) => {
            let sizes: Vec<usize> = order.iter().map(|li| li.mask.values().len()).collect();
            let all: usize = sizes.iter().sum();
            let picks = pick_pooled(&mut rng, &sizes, cap.unwrap_or(all))?;
            chosen.extend(
                picks
                    .into_iter()
                    .map(|(i, k)| (i, k as u32, order[i].mask.values()[k] == 1)),
            );
        }
    }

    let mut samples: Vec<SampleRef> = chosen
        .into_iter()
        .map(|(i, px, positive)| {
            let w = order[i].mask.width() as u32;
            SampleRef {
                image: i as u32,
                x: px % w,
                y: px / w,
                positive,
            }
        })
        .collect();
    samples.shuffle(&mut stream(policy.seed, &[tag::SHUFFLE]));

    let stems = order.iter().map(|li| li.stem.clone()).collect();
    let masks = order.iter().map(|li| li.mask.clone()).collect();
    let padded = prepared.into_iter().map(|p| p.0).collect();
    Ok(TrainingSet {
        geometry,
        channels,
        stems,
        padded,
        masks,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// `n` images of `side×side` where every `stride`-th pixel is a crack.
    fn corpus(n: usize, side: usize, stride: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|k| {
                let mask: Vec<u8> = (0..side * side)
                    .map(|i| u8::from((i + k) % stride == 0))
                    .collect();
                let pixels = mask
                    .iter()
                    .map(|&m| if m == 1 { -0.8 } else { 0.4 })
                    .collect();
                LabeledImage::new(
                    format!("img{k:02}"),
                    RasterImage::new(side, side, 1, pixels).unwrap(),
                    CrackMask::new(side, side, mask).unwrap(),
                )
                .unwrap()
            })
            .collect()
    }

    fn geometry() -> PatchGeometry {
        PatchGeometry::new(3, 3).unwrap()
    }

    #[test]
    fn uncapped_ratio() {
        let c = corpus(3, 20, 9);
        let positives: usize = c.iter().map(|li| li.mask.count_positive()).sum();
        for r in [0.5, 1.0, 3.0, 2.7] {
            let policy = SamplingPolicy {
                ratio: Ratio::Fixed(r),
                ..Default::default()
            };
            let set = build_training_set(&c, geometry(), &policy).unwrap();
            assert_eq!(set.positives(), positives);
            let expect = (r * positives as f64).round() as usize;
            assert_eq!(set.negatives(), expect);
        }
    }

    #[test]
    fn capped_budget_splits() {
        let c = corpus(2, 30, 5);
        for (r, pos, neg) in [(1.0, 60, 60), (2.0, 40, 80)] {
            let policy = SamplingPolicy {
                ratio: Ratio::Fixed(r),
                total_cap: Some(120),
                seed: 9,
                per_image: false,
            };
            let set = build_training_set(&c, geometry(), &policy).unwrap();
            assert_eq!((set.positives(), set.negatives()), (pos, neg));
        }
    }

    #[test]
    fn natural_ratio_draws_pixels() {
        let c = corpus(2, 20, 4);
        let policy = SamplingPolicy {
            ratio: Ratio::Natural,
            ..Default::default()
        };
        let set = build_training_set(&c, geometry(), &policy).unwrap();
        assert_eq!(set.len(), 800);
        assert_eq!(set.positives(), 200);
    }

    #[test]
    fn no_duplicates_and_polarity_matches_labels() {
        let c = corpus(3, 16, 7);
        let set = build_training_set(&c, geometry(), &SamplingPolicy::default()).unwrap();
        let unique: HashSet<_> = set.samples().iter().map(|s| (s.image, s.x, s.y)).collect();
        assert_eq!(unique.len(), set.len());
        for i in 0..set.len() {
            let s = set.sample(i).unwrap();
            assert_eq!(s.positive, s.labels[4] == 1);
            assert_eq!(s.pixels.len(), 49);
        }
    }

    #[test]
    fn seeds_control_order() {
        let c = corpus(2, 16, 6);
        let p = SamplingPolicy::default();
        let a = build_training_set(&c, geometry(), &p).unwrap();
        let b = build_training_set(&c, geometry(), &p).unwrap();
        assert_eq!(a.samples(), b.samples());
        let other = SamplingPolicy { seed: 1, ..p };
        let d = build_training_set(&c, geometry(), &other).unwrap();
        assert_ne!(a.samples(), d.samples());
    }

    #[test]
    fn corpus_order_does_not_matter() {
        let c = corpus(3, 12, 5);
        let mut rev = c.clone();
        rev.reverse();
        let p = SamplingPolicy::default();
        let a = build_training_set(&c, geometry(), &p).unwrap();
        let b = build_training_set(&rev, geometry(), &p).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn errors() {
        let blank = vec![LabeledImage::new(
            "blank",
            RasterImage::new(8, 8, 1, vec![0.0; 64]).unwrap(),
            CrackMask::empty(8, 8),
        )
        .unwrap()];
        assert!(matches!(
            build_training_set(&blank, geometry(), &SamplingPolicy::default()),
            Err(Error::Data(_))
        ));
        // 1 in 2 pixels positive: R=3 needs 3× as many negatives as exist
        let dense = corpus(1, 10, 2);
        assert!(build_training_set(&dense, geometry(), &SamplingPolicy::default()).is_err());
        let bad = SamplingPolicy {
            ratio: Ratio::Fixed(0.0),
            ..Default::default()
        };
        assert!(build_training_set(&dense, geometry(), &bad).is_err());
    }

    #[test]
    fn per_image_quota() {
        let c = corpus(3, 20, 9);
        let policy = SamplingPolicy {
            per_image: true,
            ..Default::default()
        };
        let set = build_training_set(&c, geometry(), &policy).unwrap();
        for img in 0..3u32 {
            let pos = set
                .samples()
                .iter()
                .filter(|s| s.image == img && s.positive)
                .count();
            let neg = set
                .samples()
                .iter()
                .filter(|s| s.image == img && !s.positive)
                .count();
            assert_eq!(neg, 3 * pos);
        }
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(Ratio::parse("natural").unwrap(), Ratio::Natural);
        assert_eq!(Ratio::parse("3").unwrap(), Ratio::Fixed(3.0));
        assert!(Ratio::parse("-1").is_err());
        assert!(Ratio::parse("x").is_err());
    }
}
