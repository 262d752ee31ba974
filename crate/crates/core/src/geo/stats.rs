//! Per-channel standardization statistics.

use serde::{Deserialize, Serialize};

use super::TileChip;
use crate::{par, Error, Result};

/// Standard deviations are floored at this value so constant channels do
/// not divide by zero.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Shape(format!(
                "channel stats with {} means and {} stds",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("standard deviation {s} is not positive")));
        }
        Ok(Self { mean, std })
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// ImageNet RGB statistics (for inputs scaled to `[0, 1]`).
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    /// Standardizes channel-major data in place.
    pub fn apply(&self, data: &mut [f32]) {
        let plane = data.len() / self.bands();
        for (b, chunk) in data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[b], self.std[b]);
            for v in chunk {
                *v = ((f64::from(*v) - m) / s) as f32;
            }
        }
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn invert(&self, data: &mut [f32]) {
        let plane = data.len() / self.bands();
        for (b, chunk) in data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[b], self.std[b]);
            for v in chunk {
                *v = (f64::from(*v) * s + m) as f32;
            }
        }
    }
}

/// Running moments for one channel (count, mean, sum of squared deviations).
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        if o.n == 0.0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }
}

/// Per-channel mean and population standard deviation over every pixel of
/// every chip (floored at [`STD_FLOOR`]).
pub fn compute_channel_stats(chips: &[TileChip]) -> Result<ChannelStats> {
    let first = chips
        .first()
        .ok_or_else(|| Error::invalid("cannot compute channel statistics of an empty chip list"))?;
    let bands = first.bands;
    if let Some(c) = chips.iter().find(|c| c.bands != bands) {
        return Err(Error::Shape(format!(
            "chip {} has {} bands, expected {bands}",
            c.uuid, c.bands
        )));
    }
    let per_chip: Vec<Vec<Moments>> = par::map_slice(chips, |chip| {
        let plane = chip.data.len() / bands;
        chip.data
            .chunks(plane)
            .map(|vals| {
                let mut m = Moments::default();
                vals.iter().for_each(|&v| m.push(f64::from(v)));
                m
            })
            .collect()
    });
    let mut total = vec![Moments::default(); bands];
    for chip in per_chip {
        for (t, m) in total.iter_mut().zip(chip) {
            *t = t.merge(m);
        }
    }
    let mean = total.iter().map(|m| m.mean).collect();
    let std = total
        .iter()
        .map(|m| (m.m2 / m.n).sqrt().max(STD_FLOOR))
        .collect();
    ChannelStats::new(mean, std)
}

/// `(x - mean[c]) / std[c]` per channel; identity fields are preserved.
pub fn standardize(chip: &TileChip, stats: &ChannelStats) -> TileChip {
    let mut out = chip.clone();
    stats.apply(&mut out.data);
    out
}

pub fn unstandardize(chip: &TileChip, stats: &ChannelStats) -> TileChip {
    let mut out = chip.clone();
    stats.invert(&mut out.data);
    out
}
