//! Warm-up-controlled throughput measurement.

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::{Error, Result};

/// Something that can run training and validation passes and report how
/// many iterations each took.
pub trait Workload {
    fn train_pass(&mut self, epoch: usize) -> Result<usize>;
    fn val_pass(&mut self, epoch: usize) -> Result<usize>;
}

/// Throughput of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRunRecord {
    pub device_name: String,
    /// Training iterations per second of training-pass time.
    pub train_it_s: f64,
    /// Validation iterations per second of validation-pass time.
    pub val_it_s: f64,
    /// Mean training plus validation time of a measured epoch.
    pub epoch_seconds: f64,
    pub ms_per_tile: Option<f64>,
    pub tiles_per_s: Option<f64>,
    pub warmup_epochs_excluded: usize,
    pub measured_epochs: usize,
}

impl DeviceRunRecord {
    /// A record from published or externally measured numbers.
    pub fn from_measurements(device: &str, train_it_s: f64, val_it_s: f64, epoch_seconds: f64) -> Self {
        Self {
            device_name: device.into(),
            train_it_s,
            val_it_s,
            epoch_seconds,
            ms_per_tile: None,
            tiles_per_s: None,
            warmup_epochs_excluded: 0,
            measured_epochs: 0,
        }
    }

    pub fn with_inference(mut self, ms_per_tile: f64) -> Self {
        self.ms_per_tile = Some(ms_per_tile);
        self.tiles_per_s = Some(if ms_per_tile > 0.0 { 1000.0 / ms_per_tile } else { 0.0 });
        self
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("train_it_s", Some(self.train_it_s)),
            ("val_it_s", Some(self.val_it_s)),
            ("epoch_seconds", Some(self.epoch_seconds)),
            ("ms_per_tile", self.ms_per_tile),
            ("tiles_per_s", self.tiles_per_s),
        ];
        for (name, v) in positive {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    out.push(format!("{}: {name} must be positive, got {v}", self.device_name));
                }
            }
        }
        if let (Some(ms), Some(tps)) = (self.ms_per_tile, self.tiles_per_s) {
            if ms > 0.0 && (tps - 1000.0 / ms).abs() > 0.01 * tps.abs() {
                out.push(format!("{}: tiles_per_s {tps} disagrees with ms_per_tile {ms}", self.device_name));
            }
        }
        out
    }
}

/// A generic description of the machine; GPU models are never guessed.
pub fn host_device_name() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("cpu-{}-{}t", std::env::consts::ARCH, threads)
}

/// Runs `warmup` untimed epochs, then `measured` timed ones, each epoch a
/// training pass followed by a validation pass on the calling thread.
pub fn timed_run(
    workload: &mut dyn Workload,
    clock: &dyn Clock,
    device_name: &str,
    warmup: usize,
    measured: usize,
) -> Result<DeviceRunRecord> {
    if measured == 0 {
        return Err(Error::invalid("timed_run needs at least one measured epoch"));
    }
    for epoch in 1..=warmup {
        workload.train_pass(epoch)?;
        workload.val_pass(epoch)?;
    }
    let (mut train_iters, mut val_iters) = (0usize, 0usize);
    let (mut train_s, mut val_s) = (0.0f64, 0.0f64);
    for epoch in warmup + 1..=warmup + measured {
        let t0 = clock.now();
        train_iters += workload.train_pass(epoch)?;
        train_s += clock.seconds_since(t0);
        let t1 = clock.now();
        val_iters += workload.val_pass(epoch)?;
        val_s += clock.seconds_since(t1);
    }
    let rate = |iters: usize, s: f64| if s > 0.0 { iters as f64 / s } else { 0.0 };
    Ok(DeviceRunRecord {
        device_name: device_name.into(),
        train_it_s: rate(train_iters, train_s),
        val_it_s: rate(val_iters, val_s),
        epoch_seconds: (train_s + val_s) / measured as f64,
        ms_per_tile: None,
        tiles_per_s: None,
        warmup_epochs_excluded: warmup,
        measured_epochs: measured,
    })
}
