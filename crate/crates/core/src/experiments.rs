//! Train-then-evaluate protocols: single runs, structure-size sweeps,
//! ratio sweeps and cross-corpus tests.

use std::fmt::Write as _;

use crate::dataset::{build_training_set, LabeledImage, PatchGeometry, Ratio, SamplingPolicy};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_corpus, Aggregation, EvalReport, Tolerance};
use crate::inference::{
    binarize, normalize_votes, predict_image, BinaryPrediction, NormMode, ProbabilityMap,
    DEFAULT_BATCH,
};
use crate::network::{
    build_network, train, ModelParams, NetworkConfig, TrainConfig, TrainingTrace,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub geometry: PatchGeometry,
    pub sampling: SamplingPolicy,
    pub train: TrainConfig,
    pub norm_mode: NormMode,
    pub threshold: f32,
    pub tolerance: Tolerance,
    pub aggregation: Aggregation,
    pub inference_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: PatchGeometry::default(),
            sampling: SamplingPolicy::default(),
            train: TrainConfig::default(),
            norm_mode: NormMode::Mean,
            threshold: 0.5,
            tolerance: Tolerance::default(),
            aggregation: Aggregation::Both,
            inference_batch: DEFAULT_BATCH,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: ModelParams<f32>,
    pub trace: TrainingTrace,
    pub positives: usize,
    pub negatives: usize,
}

/// Builds the training set from `corpus` and trains a fresh network on it.
pub fn train_on_corpus(corpus: &[LabeledImage], cfg: &ExperimentConfig) -> Result<TrainedModel> {
    let set = build_training_set(corpus, cfg.geometry, &cfg.sampling)?;
    let mut model = build_network::<f32>(
        &NetworkConfig {
            input_channels: set.channels(),
            geometry: cfg.geometry,
            dropout_p: cfg.train.dropout_p,
            beta: cfg.train.beta,
        },
        cfg.train.seed,
    )?;
    let trace = train(&mut model, &set, &cfg.train, 0, |_, _| Ok(()))?;
    Ok(TrainedModel {
        model,
        trace,
        positives: set.positives(),
        negatives: set.negatives(),
    })
}

pub struct Segmentation {
    pub stem: String,
    pub probability: ProbabilityMap,
    pub binary: BinaryPrediction,
}

/// Segments every image of `corpus`, converting channels to the model's
/// when they differ.
pub fn segment_corpus(
    model: &ModelParams<f32>,
    corpus: &[LabeledImage],
    cfg: &ExperimentConfig,
) -> Result<Vec<Segmentation>> {
    corpus
        .iter()
        .map(|li| {
            let image = li.image.with_channels(model.channels())?;
            let votes = predict_image(model, &image, cfg.inference_batch)?;
            let probability = normalize_votes(&votes, cfg.norm_mode)?;
            let binary = binarize(&probability, cfg.threshold)?;
            Ok(Segmentation {
                stem: li.stem.clone(),
                probability,
                binary,
            })
        })
        .collect()
}

pub fn evaluate_segmentations(
    segs: &[Segmentation],
    corpus: &[LabeledImage],
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    if segs.len() != corpus.len() {
        return Err(Error::Data(
            "prediction and ground-truth counts differ".into(),
        ));
    }
    let pairs: Vec<_> = segs
        .iter()
        .zip(corpus)
        .map(|(s, li)| (s.stem.clone(), s.binary.clone(), li.mask.clone()))
        .collect();
    evaluate_corpus(&pairs, cfg.tolerance, cfg.aggregation)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub trained: TrainedModel,
    pub report: EvalReport,
}

/// Trains on `train_corpus` and evaluates on `test_corpus`.
pub fn run_experiment(
    train_corpus: &[LabeledImage],
    test_corpus: &[LabeledImage],
    cfg: &ExperimentConfig,
) -> Result<RunOutcome> {
    let trained = train_on_corpus(train_corpus, cfg)?;
    let segs = segment_corpus(&trained.model, test_corpus, cfg)?;
    let report = evaluate_segmentations(&segs, test_corpus, cfg)?;
    Ok(RunOutcome { trained, report })
}

/// One run per structure size `s`, everything else fixed.
pub fn sweep_structure(
    train_corpus: &[LabeledImage],
    test_corpus: &[LabeledImage],
    cfg: &ExperimentConfig,
    sizes: &[usize],
) -> Result<Vec<(usize, RunOutcome)>> {
    let geometries = sizes
        .iter()
        .map(|&s| PatchGeometry::new(cfg.geometry.half_width, s))
        .collect::<Result<Vec<_>>>()?;
    geometries
        .into_iter()
        .map(|geometry| {
            let run = ExperimentConfig {
                geometry,
                ..cfg.clone()
            };
            Ok((
                geometry.structure,
                run_experiment(train_corpus, test_corpus, &run)?,
            ))
        })
        .collect()
}

/// One run per ratio with the total sample budget held fixed.
pub fn sweep_ratio(
    train_corpus: &[LabeledImage],
    test_corpus: &[LabeledImage],
    cfg: &ExperimentConfig,
    ratios: &[Ratio],
    total: usize,
) -> Result<Vec<(Ratio, RunOutcome)>> {
    ratios
        .iter()
        .map(|&ratio| {
            let run = ExperimentConfig {
                sampling: SamplingPolicy {
                    ratio,
                    total_cap: Some(total),
                    ..cfg.sampling
                },
                ..cfg.clone()
            };
            Ok((ratio, run_experiment(train_corpus, test_corpus, &run)?))
        })
        .collect()
}

/// First half (rounded up) of each corpus, converted to the channel count
/// of the first one.
pub fn hybrid_split(first: &[LabeledImage], second: &[LabeledImage]) -> Result<Vec<LabeledImage>> {
    let channels = first
        .first()
        .map(|li| li.image.channels())
        .ok_or_else(|| Error::Data("first corpus is empty".into()))?;
    first[..first.len().div_ceil(2)]
        .iter()
        .chain(&second[..second.len().div_ceil(2)])
        .map(|li| {
            LabeledImage::new(
                li.stem.clone(),
                li.image.with_channels(channels)?,
                li.mask.clone(),
            )
        })
        .collect()
}

/// Train on one corpus, test on another; test images take the training
/// channel count.
pub fn cross_test(
    train_corpus: &[LabeledImage],
    test_corpus: &[LabeledImage],
    cfg: &ExperimentConfig,
) -> Result<RunOutcome> {
    run_experiment(train_corpus, test_corpus, cfg)
}

/// Comparison table, one row per run.
pub fn sweep_table<K: std::fmt::Display>(label: &str, rows: &[(K, RunOutcome)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{label:>8}  {:>8} {:>8} {:>8}  {:>8} {:>8} {:>8}  {:>8} {:>8}",
        "Pr", "Re", "F1", "Pr(mac)", "Re(mac)", "F1(mac)", "pos", "neg"
    );
    for (k, run) in rows {
        let (mi, ma) = (run.report.micro, run.report.macro_avg);
        let _ = writeln!(
            out,
            "{:>8}  {:>8.4} {:>8.4} {:>8.4}  {:>8.4} {:>8.4} {:>8.4}  {:>8} {:>8}",
            k.to_string(),
            mi.precision,
            mi.recall,
            mi.f1,
            ma.precision,
            ma.recall,
            ma.f1,
            run.trained.positives,
            run.trained.negatives
        );
    }
    out
}
