use std::io::Write;
use std::path::Path;
use std::time::Instant;

use super::ModelParams;
use crate::dataset::{batch_iterator, SampleSource};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};
use crate::tensor::{adam_step, AdamConfig, LossReport, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub beta: f64,
    pub dropout_p: f64,
    pub seed: u64,
    /// Checkpoint callback period in iterations; 0 disables it.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            iterations: 30_000,
            beta: 0.0005,
            dropout_p: 0.5,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: u64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    /// `(iteration, seconds since the start of this run)` at each checkpoint.
    pub checkpoints: Vec<(u64, f64)>,
}

impl TrainingTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "iteration,cross_entropy,penalty,total")?;
            for r in &self.records {
                writeln!(
                    w,
                    "{},{:.9},{:.9},{:.9}",
                    r.iteration, r.cross_entropy, r.penalty, r.total
                )?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    /// Mean total loss over the records with `from <= iteration < to`.
    pub fn mean_total(&self, from: u64, to: u64) -> Option<f64> {
        let picked: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.iteration >= from && r.iteration < to)
            .map(|r| r.total)
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

/// One optimizer step on an explicit batch.
pub fn train_step<T: Real>(
    model: &mut ModelParams<T>,
    inputs: &Tensor<T>,
    labels: &Tensor<T>,
    config: &TrainConfig,
    iteration: u64,
) -> Result<LossReport> {
    let dropout = (config.dropout_p > 0.0).then(|| {
        (
            config.dropout_p,
            derive_seed(config.seed, &[tag::DROPOUT, iteration]),
        )
    });
    let report = model.compute_gradients(inputs, labels, config.beta, dropout)?;
    if !report.total.is_finite() {
        let positives = labels
            .data()
            .chunks(model.output_len())
            .filter(|w| w[w.len() / 2] == T::one())
            .count();
        return Err(Error::Diverged {
            iteration,
            loss: report.total,
            batch_size: inputs.shape()[0],
            positives,
        });
    }
    let adam = config.adam();
    for layer in model.layers_mut() {
        adam_step(layer, &adam)?;
    }
    Ok(report)
}

/// Mini-batch training for `config.iterations` steps starting at global
/// step `start_iteration`. Batches are drawn from seeded per-epoch
/// permutations, so a run resumed from a checkpoint sees the same batches
/// as an uninterrupted one.
///
/// `on_checkpoint` is called with the model and the number of completed
/// iterations every `checkpoint_every` steps and after the last one.
pub fn train<T, S, F>(
    model: &mut ModelParams<T>,
    source: &S,
    config: &TrainConfig,
    start_iteration: u64,
    mut on_checkpoint: F,
) -> Result<TrainingTrace>
where
    T: Real,
    S: SampleSource + ?Sized,
    F: FnMut(&ModelParams<T>, u64) -> Result<()>,
{
    if source.input_len() != model.input_len() || source.label_len() != model.output_len() {
        return Err(Error::ShapeMismatch(format!(
            "samples are {}→{}, model expects {}→{}",
            source.input_len(),
            source.label_len(),
            model.input_len(),
            model.output_len()
        )));
    }
    if !(0.0..1.0).contains(&config.dropout_p) {
        return Err(Error::InvalidArgument(format!(
            "dropout p={} must be in [0, 1)",
            config.dropout_p
        )));
    }
    let mut trace = TrainingTrace::default();
    if config.iterations == 0 {
        return Ok(trace);
    }
    let mut schedule = batch_iterator(
        source.sample_count(),
        config.batch_size,
        derive_seed(config.seed, &[tag::SHUFFLE]),
    )?;
    let side = model.geometry().patch_side();
    let (il, ll) = (model.input_len(), model.output_len());
    let started = Instant::now();
    let end = start_iteration + config.iterations;
    for it in start_iteration..end {
        let indices = schedule.batch_at(it);
        let n = indices.len();
        let mut xs = vec![T::zero(); n * il];
        let mut ys = vec![T::zero(); n * ll];
        source.fill_batch(indices, &mut xs, &mut ys)?;
        let x = Tensor::from_vec(&[n, side, side, model.channels()], xs)?;
        let y = Tensor::from_vec(&[n, ll], ys)?;
        let report = train_step(model, &x, &y, config, it)?;
        trace.records.push(TraceRecord {
            iteration: it,
            cross_entropy: report.cross_entropy,
            penalty: report.penalty,
            total: report.total,
        });
        let done = it + 1;
        if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) || done == end {
            on_checkpoint(model, done)?;
            trace
                .checkpoints
                .push((done, started.elapsed().as_secs_f64()));
        }
    }
    Ok(trace)
}
