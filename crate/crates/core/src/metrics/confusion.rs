use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result, CLASS_NAMES, NUM_CLASSES};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

fn check(label: usize, what: &str) -> Result<()> {
    if label < NUM_CLASSES {
        Ok(())
    } else {
        Err(Error::Index(format!("{what} label {label} is outside [0, {NUM_CLASSES})")))
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new();
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.update(t, p)?;
        }
        Ok(cm)
    }

    pub fn update(&mut self, truth: usize, predicted: usize) -> Result<()> {
        check(truth, "true")?;
        check(predicted, "predicted")?;
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|row| row.iter().sum())
    }

    /// Column sums: how often each class was predicted.
    pub fn prediction_counts(&self) -> [u64; NUM_CLASSES] {
        std::array::from_fn(|j| self.counts.iter().map(|row| row[j]).sum())
    }

    /// `trace / total`, or `None` for an empty matrix.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.trace() as f64 / n as f64)
    }

    /// Recall per true class; `None` for classes with no samples.
    pub fn per_class_accuracy(&self) -> [Option<f64>; NUM_CLASSES] {
        let rows = self.row_sums();
        std::array::from_fn(|i| (rows[i] > 0).then(|| self.counts[i][i] as f64 / rows[i] as f64))
    }

    /// CSV with a header row of predicted class names and one row per true
    /// class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in CLASS_NAMES {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in CLASS_NAMES.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
