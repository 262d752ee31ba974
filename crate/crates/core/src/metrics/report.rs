//! Speed-up arithmetic, radar normalization and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::timing::DeviceRunRecord;
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "device,train_it_s,val_it_s,epoch_s,ms_per_tile,tiles_per_s,speedup,basis";

/// Radar axes, in order.
pub const RADAR_METRICS: [&str; 4] = ["train_it_s", "val_it_s", "inverted_epoch_time", "speedup"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `baseline.epoch_seconds / device.epoch_seconds`.
    EpochTime,
    /// `device.train_it_s / baseline.train_it_s`.
    TrainItS,
}

impl Basis {
    pub fn as_str(self) -> &'static str {
        match self {
            Basis::EpochTime => "epoch_time",
            Basis::TrainItS => "train_it_s",
        }
    }
}

impl std::str::FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch_time" => Ok(Basis::EpochTime),
            "train_it_s" => Ok(Basis::TrainItS),
            other => Err(Error::invalid(format!("unknown speed-up basis `{other}` (expected epoch_time or train_it_s)"))),
        }
    }
}

fn positive(name: &str, device: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid(format!("{device}: {name} must be positive, got {v}")))
    }
}

/// Speed-up of `device` over `baseline`, at full precision.
pub fn speedup(baseline: &DeviceRunRecord, device: &DeviceRunRecord, basis: Basis) -> Result<f64> {
    Ok(match basis {
        Basis::EpochTime => {
            positive("epoch_seconds", &baseline.device_name, baseline.epoch_seconds)?
                / positive("epoch_seconds", &device.device_name, device.epoch_seconds)?
        }
        Basis::TrainItS => {
            positive("train_it_s", &device.device_name, device.train_it_s)?
                / positive("train_it_s", &baseline.device_name, baseline.train_it_s)?
        }
    })
}

/// Two significant figures, e.g. `1.8`, `2.0`, `12`, `0.55`, `120`.
pub fn format_sig2(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let scale = 10f64.powi(1 - x.abs().log10().floor() as i32);
    let r = (x * scale).round() / scale;
    let decimals = (1 - r.abs().log10().floor() as i32).max(0) as usize;
    format!("{r:.decimals$}")
}

/// Scales each column of `values` by its maximum so the best device scores
/// 1.0. A column whose entries are all equal becomes all 1.0.
fn normalize_columns(values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = values.first().map_or(0, Vec::len);
    let maxes: Vec<f64> = (0..k).map(|j| values.iter().map(|v| v[j]).fold(f64::MIN, f64::max)).collect();
    values.iter().map(|v| v.iter().zip(&maxes).map(|(x, m)| x / m).collect()).collect()
}

/// Per-device radar vectors over [`RADAR_METRICS`]; epoch time is inverted
/// before normalization.
pub fn radar_normalize(records: &[DeviceRunRecord], speedups: &[f64]) -> Result<Vec<Vec<f64>>> {
    if records.len() < 2 {
        return Err(Error::invalid(format!("radar normalization needs at least 2 devices, got {}", records.len())));
    }
    if speedups.len() != records.len() {
        return Err(Error::Shape(format!("{} records but {} speed-ups", records.len(), speedups.len())));
    }
    let raw = records
        .iter()
        .zip(speedups)
        .map(|(r, &s)| {
            Ok(vec![
                positive("train_it_s", &r.device_name, r.train_it_s)?,
                positive("val_it_s", &r.device_name, r.val_it_s)?,
                1.0 / positive("epoch_seconds", &r.device_name, r.epoch_seconds)?,
                positive("speedup", &r.device_name, s)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_columns(&raw))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupEntry {
    pub device: String,
    pub basis: Basis,
    pub ratio: f64,
    /// Two significant figures.
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarEntry {
    pub device: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub baseline_device: String,
    pub records: Vec<DeviceRunRecord>,
    pub speedups: Vec<SpeedupEntry>,
    pub radar_metrics: Vec<String>,
    /// Empty with fewer than two devices.
    pub radar: Vec<RadarEntry>,
}

impl BenchReport {
    /// Builds a report. Every device uses `default_basis` unless
    /// `overrides` names another basis for it; the baseline is 1.0 on any
    /// basis.
    pub fn build(
        baseline: &str,
        records: Vec<DeviceRunRecord>,
        default_basis: Basis,
        overrides: &BTreeMap<String, Basis>,
    ) -> Result<Self> {
        let base = records
            .iter()
            .find(|r| r.device_name == baseline)
            .ok_or_else(|| Error::invalid(format!("baseline device `{baseline}` has no record")))?
            .clone();
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert(r.device_name.as_str()) {
                return Err(Error::invalid(format!("device `{}` appears twice", r.device_name)));
            }
        }
        if let Some(name) = overrides.keys().find(|n| !seen.contains(n.as_str())) {
            return Err(Error::invalid(format!("speed-up basis override names unknown device `{name}`")));
        }
        let speedups = records
            .iter()
            .map(|r| {
                let basis = overrides.get(&r.device_name).copied().unwrap_or(default_basis);
                let ratio = if r.device_name == baseline { 1.0 } else { speedup(&base, r, basis)? };
                Ok(SpeedupEntry {
                    device: r.device_name.clone(),
                    basis,
                    ratio,
                    display: format_sig2(ratio),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let radar = if records.len() >= 2 {
            let ratios: Vec<f64> = speedups.iter().map(|s| s.ratio).collect();
            radar_normalize(&records, &ratios)?
                .into_iter()
                .zip(&records)
                .map(|(values, r)| RadarEntry {
                    device: r.device_name.clone(),
                    values,
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            baseline_device: baseline.into(),
            records,
            speedups,
            radar_metrics: RADAR_METRICS.iter().map(|s| s.to_string()).collect(),
            radar,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for (r, s) in self.records.iter().zip(&self.speedups) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.device_name,
                r.train_it_s,
                r.val_it_s,
                r.epoch_seconds,
                opt(r.ms_per_tile),
                opt(r.tiles_per_s),
                s.display,
                s.basis.as_str()
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::parse("bench report", e.to_string()))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::parse(
                "bench report",
                format!("schema version {} (expected {REPORT_SCHEMA_VERSION})", r.schema_version),
            ));
        }
        Ok(r)
    }

    /// Bar-chart series: one row per metric and device, raw values.
    pub fn bar_chart_csv(&self) -> String {
        let mut out = String::from("metric,device,value\n");
        let metrics: [(&str, fn(&DeviceRunRecord) -> f64); 3] = [
            ("train_it_s", |r| r.train_it_s),
            ("val_it_s", |r| r.val_it_s),
            ("epoch_s", |r| r.epoch_seconds),
        ];
        for (name, get) in metrics {
            for r in &self.records {
                let _ = writeln!(out, "{name},{},{}", r.device_name, get(r));
            }
        }
        for s in &self.speedups {
            let _ = writeln!(out, "speedup,{},{}", s.device, s.ratio);
        }
        out
    }

    /// Radar series: one row per device and axis, normalized values.
    pub fn radar_chart_csv(&self) -> String {
        let mut out = String::from("device,metric,value\n");
        for e in &self.radar {
            for (m, v) in self.radar_metrics.iter().zip(&e.values) {
                let _ = writeln!(out, "{},{m},{v}", e.device);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `bench_report.csv` / `bench_report.json` and optionally the chart
/// series into `dir`; returns the written paths.
pub fn emit_report(report: &BenchReport, dir: &Path, formats: &[ReportFormat], chart_data: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Csv => write(dir.join("bench_report.csv"), &report.to_csv(), &mut written)?,
            ReportFormat::Json => write(dir.join("bench_report.json"), &report.to_json(), &mut written)?,
        }
    }
    if chart_data {
        write(dir.join("chart_bars.csv"), &report.bar_chart_csv(), &mut written)?;
        write(dir.join("chart_radar.csv"), &report.radar_chart_csv(), &mut written)?;
    }
    Ok(written)
}
