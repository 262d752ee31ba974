//! Epoch loop with validation, early stopping and per-epoch timing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::dataset::{batch_iter, with_prefetch, AugmentationConfig, Batch, BatchOptions, LabeledSet, Normalizer, SplitAssignment};
use crate::nn::{cross_entropy, Network, OptimizerState};
use crate::{Error, Result};

/// A validation loss counts as an improvement only if it beats the best so
/// far by more than this.
pub const MIN_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub patience: usize,
    /// Untimed epochs that precede measurement in bench mode.
    pub warmup_epochs: usize,
    /// Batches prepared ahead of the training loop.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            momentum: 0.9,
            patience: 3,
            warmup_epochs: 5,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.max_epochs == 0 {
            out.push("max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        out
    }
}

/// Loss, accuracy and timing of one pass over a split.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PassStats {
    /// Mean per-sample loss.
    pub loss: f64,
    pub acc: f64,
    pub iters: usize,
    pub samples: usize,
    pub seconds: f64,
}

impl PassStats {
    /// Iterations per second; zero when no time was measured.
    pub fn it_per_s(&self) -> f64 {
        if self.seconds > 0.0 {
            self.iters as f64 / self.seconds
        } else {
            0.0
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    // first maximum wins, so ties go to the lowest class id
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn correct(logits: &[f32], k: usize, labels: &[usize]) -> usize {
    logits.chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// One optimization pass: forward, loss, backward and an SGD step per batch.
pub fn train_epoch(
    net: &mut Network<f32>,
    opt: &mut OptimizerState<f32>,
    batches: &mut dyn Iterator<Item = Batch>,
    epoch: usize,
    clock: &dyn Clock,
) -> Result<PassStats> {
    let start = clock.now();
    let mut stats = PassStats::default();
    let (mut loss_sum, mut hits) = (0.0, 0);
    for (b, batch) in batches.enumerate() {
        let (logits, cache) = net.forward_train(&batch.x)?;
        let (loss, grad) = cross_entropy(&logits, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
        }
        let grads = net.backward(&cache, &grad)?;
        net.sgd_step(&grads, opt)?;
        let n = batch.labels.len();
        loss_sum += loss * n as f64;
        hits += correct(logits.data(), logits.shape()[1], &batch.labels);
        stats.samples += n;
        stats.iters += 1;
    }
    stats.seconds = clock.seconds_since(start);
    if stats.samples == 0 {
        return Err(Error::Empty("training split produced no batches".into()));
    }
    stats.loss = loss_sum / stats.samples as f64;
    stats.acc = hits as f64 / stats.samples as f64;
    Ok(stats)
}

/// Eval-mode pass: running normalization statistics, no parameter updates.
pub fn validate(net: &Network<f32>, batches: &mut dyn Iterator<Item = Batch>, clock: &dyn Clock) -> Result<PassStats> {
    let start = clock.now();
    let mut stats = PassStats::default();
    let (mut loss_sum, mut hits) = (0.0, 0);
    for batch in batches {
        let logits = net.forward(&batch.x)?;
        let (loss, _) = cross_entropy(&logits, &batch.labels)?;
        let n = batch.labels.len();
        loss_sum += loss * n as f64;
        hits += correct(logits.data(), logits.shape()[1], &batch.labels);
        stats.samples += n;
        stats.iters += 1;
    }
    stats.seconds = clock.seconds_since(start);
    if stats.samples == 0 {
        return Err(Error::Empty("validation split produced no batches".into()));
    }
    stats.loss = loss_sum / stats.samples as f64;
    stats.acc = hits as f64 / stats.samples as f64;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Training plus validation wall time.
    pub epoch_seconds: f64,
    pub train_iters: usize,
    pub val_iters: usize,
    pub train_it_per_s: f64,
    pub val_it_per_s: f64,
}

impl EpochRecord {
    pub fn from_passes(epoch: usize, train: &PassStats, val: &PassStats) -> Self {
        Self {
            epoch,
            train_loss: train.loss,
            train_acc: train.acc,
            val_loss: val.loss,
            val_acc: val.acc,
            epoch_seconds: train.seconds + val.seconds,
            train_iters: train.iters,
            val_iters: val.iters,
            train_it_per_s: train.it_per_s(),
            val_it_per_s: val.it_per_s(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Completed => "completed",
            StopReason::EarlyStopped => "early_stopped",
        })
    }
}

/// Patience bookkeeping. After each epoch, `wait` counts the epochs since
/// the last improvement; training stops once `wait` reaches
/// `max(patience, 1)`. With the best epoch at 0-based position `b`, the
/// stop therefore lands on 1-based epoch `b + patience + 1` (for
/// `patience >= 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    /// 1-based epoch of the best loss; 0 before the first observation.
    pub best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Records the loss of `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best_loss - MIN_DELTA {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience.max(1))
        }
    }
}

/// Everything [`fit`] needs besides the model.
pub struct FitData<'a> {
    pub set: &'a LabeledSet,
    pub split: &'a SplitAssignment,
    pub augment: &'a AugmentationConfig,
    pub normalizer: &'a Normalizer,
    pub seed: u64,
}

/// Optional callbacks for [`fit`].
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Replaces the measured validation loss of an epoch (test harnesses).
    pub val_loss: Option<Box<dyn FnMut(usize, f64) -> f64 + 'a>>,
    /// Called after every epoch.
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Weights from the best-validation-loss epoch.
    pub best: Network<f32>,
    pub best_optimizer: OptimizerState<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

fn train_options(cfg: &TrainConfig) -> BatchOptions {
    BatchOptions {
        batch_size: cfg.batch_size,
        shuffle: true,
        augment: true,
    }
}

fn eval_options(cfg: &TrainConfig) -> BatchOptions {
    BatchOptions {
        batch_size: cfg.batch_size,
        shuffle: false,
        augment: false,
    }
}

/// Runs one training epoch and one validation pass of `epoch` (1-based).
pub fn run_epoch(
    net: &mut Network<f32>,
    opt: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    data: &FitData<'_>,
    epoch: usize,
    clock: &dyn Clock,
) -> Result<(PassStats, PassStats)> {
    let it = batch_iter(
        data.set,
        &data.split.train_idx,
        train_options(cfg),
        data.augment,
        data.normalizer,
        data.seed,
        epoch,
    )?;
    let train = with_prefetch(it, cfg.prefetch, |b| train_epoch(net, opt, b, epoch, clock))?;
    let it = batch_iter(
        data.set,
        &data.split.val_idx,
        eval_options(cfg),
        data.augment,
        data.normalizer,
        data.seed,
        epoch,
    )?;
    let val = with_prefetch(it, cfg.prefetch, |b| validate(net, b, clock))?;
    Ok((train, val))
}

/// Trains for up to `max_epochs` with early stopping on validation loss and
/// returns the best-epoch weights.
pub fn fit(
    mut net: Network<f32>,
    cfg: &TrainConfig,
    data: &FitData<'_>,
    clock: &dyn Clock,
    mut hooks: FitHooks<'_>,
) -> Result<FitOutcome> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut opt = net.optimizer(cfg.lr, cfg.momentum)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = (net.clone(), opt.clone());
    let mut history = Vec::new();
    let mut stop_reason = StopReason::Completed;
    for epoch in 1..=cfg.max_epochs {
        let (train, mut val) = run_epoch(&mut net, &mut opt, cfg, data, epoch, clock)?;
        if let Some(h) = hooks.val_loss.as_mut() {
            val.loss = h(epoch, val.loss);
        }
        let record = EpochRecord::from_passes(epoch, &train, &val);
        if let Some(h) = hooks.on_epoch.as_mut() {
            h(&record);
        }
        history.push(record);
        let (improved, stop) = stopper.observe(epoch, val.loss);
        if improved {
            best = (net.clone(), opt.clone());
        }
        if stop {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(FitOutcome {
        best: best.0,
        best_optimizer: best.1,
        best_epoch: stopper.best_epoch,
        history,
        stop_reason,
    })
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,epoch_seconds,train_it_s,val_it_s";

/// Writes the history CSV. Floats use Rust's shortest round-trip format,
/// so identical records give identical bytes.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.epoch_seconds, r.train_it_per_s, r.val_it_per_s
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a history CSV. Iteration counts are not stored and come back as 0.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::parse(path.display(), format!("expected header `{HISTORY_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::parse(path.display(), format!("line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad(&format!("bad number `{}`", f[j])));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                val_loss: num(3)?,
                val_acc: num(4)?,
                epoch_seconds: num(5)?,
                train_iters: 0,
                val_iters: 0,
                train_it_per_s: num(6)?,
                val_it_per_s: num(7)?,
            })
        })
        .collect()
}
