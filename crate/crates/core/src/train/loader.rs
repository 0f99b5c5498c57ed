//! Deterministic batch stream with optional background workers.
//!
//! Batch `b` of epoch `e` depends only on `(seed, e, b)`: the epoch's shuffle,
//! the batch's output scale and each sample's augmentation draw come from
//! independent derived generators, so the stream is the same for any worker
//! count.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use lc3net_tensor::{par, Tensor};
use rand::seq::SliceRandom;

use crate::data::{augment_to, derived_rng, make_batch, AugmentConfig, DatasetIndex, Sample};
use crate::error::{Error, Result};

pub const WORKERS_ENV: &str = "LC3_NUM_WORKERS";
const QUEUE_DEPTH: usize = 2;

const SHUFFLE: u64 = 1;
const SCALE: u64 = 2;
const AUGMENT: u64 = 3;

#[derive(Clone, Debug)]
pub enum Source {
    Files(DatasetIndex),
    Memory(Vec<Sample>),
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Files(d) => d.len(),
            Source::Memory(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        match self {
            Source::Files(d) => d.load(index),
            Source::Memory(v) => Ok(v[index].clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub epoch: usize,
    pub index: usize,
    pub images: Tensor,
    pub masks: Tensor,
    pub stems: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub len: usize,
}

impl BatchPlan {
    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut derived_rng(self.seed, epoch as u64, 0, SHUFFLE));
        order
    }

    pub fn build(&self, source: &Source, epoch: usize, index: usize) -> Result<Batch> {
        let order = self.epoch_order(epoch);
        let start = index * self.batch_size;
        let members = &order[start..(start + self.batch_size).min(self.len)];
        let scale = self
            .augment
            .draw_scale(&mut derived_rng(self.seed, epoch as u64, index as u64, SCALE));
        let target = self.augment.target_size(scale);
        let samples = par::map_slice(members, |&i| {
            let s = source.get(i)?;
            let mut rng = derived_rng(self.seed, epoch as u64, i as u64, AUGMENT);
            Ok(augment_to(&s, &self.augment, target, &mut rng))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (images, masks) = make_batch(&samples)?;
        Ok(Batch {
            epoch,
            index,
            images,
            masks,
            stems: samples.into_iter().map(|s| s.stem).collect(),
        })
    }
}

/// Worker count from the environment, defaulting to one background thread.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v:?} is not a non-negative integer"))),
        Err(_) => Ok(1),
    }
}

/// Yields every batch of `epochs` epochs in order.
pub struct Loader {
    plan: Arc<BatchPlan>,
    source: Arc<Source>,
    jobs: Vec<(usize, usize)>,
    next: usize,
    queues: Vec<Receiver<Result<Batch>>>,
    handles: Vec<JoinHandle<()>>,
}

impl Loader {
    pub fn new(plan: BatchPlan, source: Source, epochs: usize, workers: usize) -> Self {
        let per_epoch = plan.batches_per_epoch();
        let jobs: Vec<(usize, usize)> = (0..epochs).flat_map(|e| (0..per_epoch).map(move |b| (e, b))).collect();
        let plan = Arc::new(plan);
        let source = Arc::new(source);
        let mut queues = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = sync_channel(QUEUE_DEPTH);
            let (plan, source) = (Arc::clone(&plan), Arc::clone(&source));
            let mine: Vec<(usize, usize)> = jobs.iter().copied().skip(w).step_by(workers).collect();
            handles.push(std::thread::spawn(move || {
                for (e, b) in mine {
                    if tx.send(plan.build(&source, e, b)).is_err() {
                        return;
                    }
                }
            }));
            queues.push(rx);
        }
        Self {
            plan,
            source,
            jobs,
            next: 0,
            queues,
            handles,
        }
    }

    pub fn total_batches(&self) -> usize {
        self.jobs.len()
    }
}

impl Iterator for Loader {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let j = self.next;
        let &(epoch, index) = self.jobs.get(j)?;
        self.next += 1;
        if self.queues.is_empty() {
            return Some(self.plan.build(&self.source, epoch, index));
        }
        let q = &self.queues[j % self.queues.len()];
        Some(
            q.recv()
                .unwrap_or_else(|_| Err(Error::Dataset("data worker stopped unexpectedly".into()))),
        )
    }
}

impl Drop for Loader {
    fn drop(&mut self) {
        self.queues.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_disks;

    fn plan(len: usize) -> BatchPlan {
        BatchPlan {
            seed: 5,
            batch_size: 3,
            augment: AugmentConfig {
                train_size: 32,
                ..AugmentConfig::default()
            },
            len,
        }
    }

    #[test]
    fn stream_is_independent_of_worker_count() {
        let source = Source::Memory(synthetic_disks(7, 40, 1));
        let collect = |workers| {
            Loader::new(plan(7), source.clone(), 2, workers)
                .map(|b| b.unwrap())
                .map(|b| (b.stems, b.images.data().to_vec(), b.masks.data().to_vec()))
                .collect::<Vec<_>>()
        };
        let inline = collect(0);
        assert_eq!(inline.len(), 6);
        assert_eq!(inline, collect(1));
        assert_eq!(inline, collect(3));
    }

    #[test]
    fn batches_share_size_and_are_multiples_of_32() {
        let source = Source::Memory(synthetic_disks(5, 40, 2));
        for b in Loader::new(plan(5), source, 3, 0) {
            let b = b.unwrap();
            let s = b.images.shape();
            assert_eq!(s[2] % 32, 0);
            assert_eq!(s[2], s[3]);
            assert_eq!(b.masks.shape()[0], s[0]);
        }
    }
}
