use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Epoch-wise shuffled mini-batches over `len` samples. Each epoch uses its
/// own permutation derived from the seed; the last batch of an epoch may be
/// short.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    len: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

pub fn batch_iterator(len: usize, batch_size: usize, seed: u64) -> Result<BatchSchedule> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    if len == 0 {
        return Err(Error::Data("no samples to batch".into()));
    }
    Ok(BatchSchedule {
        len,
        batch_size,
        seed,
        cached: None,
    })
}

impl BatchSchedule {
    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn last_batch_len(&self) -> usize {
        match self.len % self.batch_size {
            0 => self.batch_size,
            r => r,
        }
    }

    pub fn epoch_permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut stream(self.seed, &[tag::EPOCH, epoch]));
        order
    }

    /// Sample indices of the batch consumed at global step `iteration`.
    pub fn batch_at(&mut self, iteration: u64) -> &[usize] {
        let per_epoch = self.batches_per_epoch() as u64;
        let epoch = iteration / per_epoch;
        let k = (iteration % per_epoch) as usize;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached = Some((epoch, self.epoch_permutation(epoch)));
        }
        let order = &self.cached.as_ref().expect("cached above").1;
        let start = k * self.batch_size;
        &order[start..(start + self.batch_size).min(self.len)]
    }

    /// All batches of one epoch.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Vec<usize>> {
        let order = self.epoch_permutation(epoch);
        let b = self.batch_size;
        (0..self.batches_per_epoch())
            .map(move |k| order[k * b..((k + 1) * b).min(order.len())].to_vec())
    }
}
