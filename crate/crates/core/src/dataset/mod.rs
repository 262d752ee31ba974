//! Labeled chip sets, stratified splits, augmentation and batching.

pub mod archive;
pub mod augment;
pub mod batch;
pub mod split;

pub use archive::{read_archive, write_archive};
pub use augment::{
    center_crop_eval, random_flip, random_resized_crop, resize_bilinear, sample_window, AugmentationConfig, Axis,
    Image, NormProfile, Normalizer, Window,
};
pub use batch::{batch_iter, epoch_order, eval_input, with_prefetch, Batch, BatchIter, BatchOptions};
pub use split::{stratified_split, Fractions, SplitAssignment, SplitPart};

use crate::geo::TileChip;
use crate::{Error, Result, CLASS_NAMES, NUM_CLASSES};

/// Chips that all carry a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub chips: Vec<TileChip>,
    pub class_names: Vec<String>,
}

impl LabeledSet {
    pub fn new(chips: Vec<TileChip>) -> Result<Self> {
        for (i, c) in chips.iter().enumerate() {
            match c.label {
                Some(l) if usize::from(l) < NUM_CLASSES => {}
                Some(l) => return Err(Error::invalid(format!("chip {i} ({}) has label {l}", c.uuid))),
                None => return Err(Error::invalid(format!("chip {i} ({}) has no label", c.uuid))),
            }
        }
        if let Some(first) = chips.first() {
            if let Some(c) = chips.iter().find(|c| c.bands != first.bands || c.size != first.size) {
                return Err(Error::Shape(format!(
                    "chip {} is {}x{}x{}, expected {}x{}x{}",
                    c.uuid, c.bands, c.size, c.size, first.bands, first.size, first.size
                )));
            }
        }
        Ok(Self {
            chips,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.chips[i].label.expect("validated on construction"))
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut out = [0; NUM_CLASSES];
        for i in 0..self.len() {
            out[self.label(i)] += 1;
        }
        out
    }
}
