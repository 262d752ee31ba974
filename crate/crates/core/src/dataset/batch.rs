//! Deterministic mini-batch iteration.
//!
//! Reseed rule: the order of epoch `e` is a permutation drawn from the
//! `"shuffle/e"` stream of the master seed, and chip `i` is augmented in
//! epoch `e` with the `"augment/e/i"` stream. Batches therefore do not
//! depend on batch size, worker count or prefetch depth.

use std::sync::mpsc;

use rand::seq::SliceRandom;

use super::augment::{augment_train, center_crop_eval, AugmentationConfig, Image, Normalizer};
use super::LabeledSet;
use crate::geo::TileChip;
use crate::nn::Tensor;
use crate::{par, seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    /// Training augmentation; otherwise the eval center crop.
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `N x C x T x T`.
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Positions of the samples in the labeled set.
    pub indices: Vec<usize>,
}

/// Iteration order of `indices` in `epoch`.
pub fn epoch_order(indices: &[usize], shuffle: bool, master_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    if shuffle {
        order.shuffle(&mut seed::rng(master_seed, &format!("shuffle/{epoch}")));
    }
    order
}

pub struct BatchIter<'a> {
    set: &'a LabeledSet,
    order: Vec<usize>,
    pos: usize,
    opts: BatchOptions,
    cfg: &'a AugmentationConfig,
    norm: &'a Normalizer,
    seed: u64,
    epoch: usize,
}

/// Batches over the chips at `indices`. The last batch may be short; an
/// empty index list yields no batches.
pub fn batch_iter<'a>(
    set: &'a LabeledSet,
    indices: &[usize],
    opts: BatchOptions,
    cfg: &'a AugmentationConfig,
    norm: &'a Normalizer,
    master_seed: u64,
    epoch: usize,
) -> Result<BatchIter<'a>> {
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    cfg.validate()?;
    if let Some(&i) = indices.iter().find(|&&i| i >= set.len()) {
        return Err(Error::Index(format!("index {i} is outside a set of {} chips", set.len())));
    }
    if let Some(c) = set.chips.first() {
        norm.check_bands(c.bands)?;
    }
    Ok(BatchIter {
        set,
        order: epoch_order(indices, opts.shuffle, master_seed, epoch),
        pos: 0,
        opts,
        cfg,
        norm,
        seed: master_seed,
        epoch,
    })
}

fn chip_image(chip: &TileChip) -> Image {
    Image {
        bands: chip.bands,
        height: chip.size,
        width: chip.size,
        data: chip.data.clone(),
    }
}

/// The deterministic eval-time model input for one chip (resize, center
/// crop, normalize), channel-major.
pub fn eval_input(chip: &TileChip, cfg: &AugmentationConfig, norm: &Normalizer) -> Result<Vec<f32>> {
    let mut out = center_crop_eval(&chip_image(chip), cfg);
    norm.apply(&mut out)?;
    Ok(out.data)
}

impl BatchIter<'_> {
    fn sample(&self, idx: usize) -> Vec<f32> {
        let chip = &self.set.chips[idx];
        let img = chip_image(chip);
        let mut out = if self.opts.augment {
            let mut rng = seed::rng(self.seed, &format!("augment/{}/{idx}", self.epoch));
            augment_train(&img, self.cfg, &mut rng)
        } else {
            center_crop_eval(&img, self.cfg)
        };
        self.norm.apply(&mut out).expect("bands checked at construction");
        out.data
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.opts.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let samples = par::map_slice(&indices, |&i| self.sample(i));
        let bands = self.set.chips[indices[0]].bands;
        let t = self.cfg.target_size;
        let x = Tensor::new(vec![indices.len(), bands, t, t], samples.concat()).expect("sample sizes are fixed");
        Some(Batch {
            x,
            labels: indices.iter().map(|&i| self.set.label(i)).collect(),
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.opts.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Runs `consume` over `iter` while a background thread prepares up to
/// `depth` items ahead. Items arrive in exactly the order `iter` produces
/// them. With `depth == 0` everything runs on the calling thread.
pub fn with_prefetch<I, R>(iter: I, depth: usize, consume: impl FnOnce(&mut dyn Iterator<Item = I::Item>) -> R) -> R
where
    I: Iterator + Send,
    I::Item: Send,
{
    if depth == 0 {
        let mut iter = iter;
        return consume(&mut iter);
    }
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel(depth);
        s.spawn(move || {
            for item in iter {
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        let out = consume(&mut rx.iter());
        // dropping the receiver unblocks a producer that is still running
        drop(rx);
        out
    })
}
