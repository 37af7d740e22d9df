use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{ImageTensor, LabelMask};

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

/// Sample indices of one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedIndices {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Source images with masks and target images (never target masks).
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub source_images: Vec<ImageTensor>,
    pub source_masks: Vec<LabelMask>,
    pub target_images: Vec<ImageTensor>,
}

/// Deterministic schedule of paired mini-batches.
///
/// Each domain is read as an endless sequence of epochs, every epoch a fresh
/// seeded permutation of that domain's indices; step `k` takes positions
/// `k·B .. (k+1)·B` of each sequence. The batch at any step is therefore a
/// pure function of `(seed, step)`, which is what makes resumed runs match
/// uninterrupted ones.
#[derive(Clone, Debug)]
pub struct PairedBatches {
    source_len: usize,
    target_len: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
}

impl PairedBatches {
    /// `target_len == 0` yields source-only batches.
    pub fn new(source_len: usize, target_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if source_len == 0 {
            return Err(Error::Input("source dataset is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if batch_size > source_len || (target_len > 0 && batch_size > target_len) {
            log::warn!(
                "batch size {batch_size} exceeds a dataset size ({source_len}/{target_len}); samples repeat within a batch"
            );
        }
        Ok(Self {
            source_len,
            target_len,
            batch_size,
            seed,
            step: 0,
        })
    }

    /// Positions the stream so the next batch is the one for `step`.
    pub fn starting_at(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.source_len.div_ceil(self.batch_size)
    }

    fn permutation(&self, stream: u64, len: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.seed, &[stream, epoch]));
        idx.shuffle(&mut rng);
        idx
    }

    fn take(&self, stream: u64, len: usize, step: u64) -> Vec<usize> {
        if len == 0 {
            return Vec::new();
        }
        let start = step * self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in start..start + self.batch_size as u64 {
            let epoch = pos / len as u64;
            let within = (pos % len as u64) as usize;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.permutation(stream, len, epoch)));
            }
            out.push(cached.as_ref().expect("just filled").1[within]);
        }
        out
    }

    pub fn batch_at(&self, step: u64) -> PairedIndices {
        PairedIndices {
            source: self.take(SOURCE_STREAM, self.source_len, step),
            target: self.take(TARGET_STREAM, self.target_len, step),
        }
    }

    /// Materializes the batch for `step`.
    pub fn gather(
        &self,
        step: u64,
        source: &LabeledDataset,
        target: Option<&UnlabeledDataset>,
    ) -> PairedBatch {
        let idx = self.batch_at(step);
        PairedBatch {
            source_images: idx.source.iter().map(|&i| source.images[i].clone()).collect(),
            source_masks: idx.source.iter().map(|&i| source.masks[i].clone()).collect(),
            target_images: match target {
                Some(t) => idx.target.iter().map(|&i| t.images[i].clone()).collect(),
                None => Vec::new(),
            },
        }
    }
}

impl Iterator for PairedBatches {
    type Item = PairedIndices;

    fn next(&mut self) -> Option<PairedIndices> {
        let b = self.batch_at(self.step);
        self.step += 1;
        Some(b)
    }
}
