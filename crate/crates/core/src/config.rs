//! The declarative pipeline configuration.
//!
//! A config is a versioned TOML document. Every section is optional and
//! falls back to its defaults; unknown keys are errors. Values given on the
//! command line (`--set section.key=value` and the per-stage flags) are
//! applied to the parsed document before it is checked, so they take
//! precedence over the file. Relative paths resolve against the current
//! directory.
//!
//! Seed precedence: `--seed`, then `seed` in the file, then the `LULC_SEED`
//! environment variable, then [`DEFAULT_SEED`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{AugmentationConfig, Fractions};
use crate::map::MapStyle;
use crate::metrics::{Basis, DeviceRunRecord, ReportFormat};
use crate::nn::NetworkConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "LULC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root of every artifact the pipeline writes.
    pub work_dir: PathBuf,
    /// External scene manifest. Without one, `ingest` reads the catalog
    /// written by `synth`.
    pub catalog: Option<PathBuf>,
    /// GeoJSON region of interest; tiles outside it are dropped.
    pub roi: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            work_dir: "work".into(),
            catalog: None,
            roi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    /// Edge of the square class cells in pixels.
    pub cell: usize,
    pub noise_std: f32,
    pub texture_amplitude: f32,
}

impl Default for SynthConfig {
    /// 40 scenes of 10x5 tiles: 2,000 chips, 200 per class.
    fn default() -> Self {
        Self {
            scenes: 40,
            width: 640,
            height: 320,
            cell: 64,
            noise_std: 0.08,
            texture_amplitude: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    #[serde(deserialize_with = "de_date", serialize_with = "ser_date")]
    pub start_date: NaiveDate,
    #[serde(deserialize_with = "de_date", serialize_with = "ser_date")]
    pub end_date: NaiveDate,
    /// Scenes need strictly less cloud cover than this.
    pub max_cloud_pct: f64,
}

impl Default for IngestConfig {
    /// June to August 2023, under 10 % cloud.
    fn default() -> Self {
        Self {
            start_date: NaiveDate::from_ymd_opt(2023, 6, 1).expect("valid date"),
            end_date: NaiveDate::from_ymd_opt(2023, 8, 31).expect("valid date"),
            max_cloud_pct: 10.0,
        }
    }
}

/// Accepts both a TOML date literal and a quoted `YYYY-MM-DD` string.
fn de_date<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<NaiveDate, D::Error> {
    let text = match toml::Value::deserialize(d)? {
        toml::Value::String(s) => s,
        toml::Value::Datetime(dt) => dt.to_string(),
        other => return Err(serde::de::Error::custom(format!("expected a date, got {other}"))),
    };
    text.parse()
        .map_err(|e| serde::de::Error::custom(format!("bad date `{text}`: {e}")))
}

fn ser_date<S: Serializer>(d: &NaiveDate, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&d.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UuidMode {
    /// Drawn from the master seed (reproducible).
    Seeded,
    /// Drawn from OS entropy.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    pub tile_size: usize,
    pub min_valid_fraction: f64,
    pub uuids: UuidMode,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            min_valid_fraction: 1.0,
            uuids: UuidMode::Seeded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Predictions with confidence strictly below `tau` are suppressed.
    pub tau: f64,
    /// Majority-filter passes over the tile grid.
    pub filter_passes: usize,
    pub batch_size: usize,
    /// Scene to map; defaults to the first ingested scene.
    pub scene: Option<String>,
    /// Pixels per tile cell in `raster.png`.
    pub png_scale: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: crate::infer::DEFAULT_TAU,
            filter_passes: 1,
            batch_size: 32,
            scene: None,
            png_scale: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Name of this host in the report; probed when unset.
    pub device_name: Option<String>,
    /// Untimed epochs before measurement.
    pub warmup_epochs: usize,
    pub measured_epochs: usize,
    /// Training batches per benchmark epoch (0 = the whole training split).
    pub train_batches: usize,
    /// Validation batches per benchmark epoch (0 = the whole validation split).
    pub val_batches: usize,
    /// Tiles timed for the inference latency (0 = the whole test split).
    pub inference_tiles: usize,
    /// Report baseline; defaults to this host.
    pub baseline: Option<String>,
    pub basis: Basis,
    /// Per-device basis, overriding `basis`.
    pub basis_overrides: BTreeMap<String, Basis>,
    pub formats: Vec<ReportFormat>,
    /// Also write the bar and radar chart series.
    pub chart_data: bool,
    /// Externally measured devices to report alongside this host.
    pub reference_records: Vec<DeviceRunRecord>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            device_name: None,
            warmup_epochs: 5,
            measured_epochs: 2,
            train_batches: 8,
            val_batches: 4,
            inference_tiles: 64,
            baseline: None,
            basis: Basis::EpochTime,
            basis_overrides: BTreeMap::new(),
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
            chart_data: true,
            reference_records: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    /// Host monotonic time.
    Monotonic,
    /// A counter advancing `tick_ms` per reading; timings become a
    /// deterministic function of the work done.
    Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub clock: ClockKind,
    pub tick_ms: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            clock: ClockKind::Monotonic,
            tick_ms: 1.0,
        }
    }
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    pub threads: usize,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub tiling: TilingConfig,
    pub split: Fractions,
    pub augment: AugmentationConfig,
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub bench: BenchConfig,
    pub timing: TimingConfig,
    pub style: MapStyle,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = NetworkConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            threads: 0,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            tiling: TilingConfig::default(),
            split: Fractions::default(),
            augment: AugmentationConfig {
                target_size: model.input_size,
                ..AugmentationConfig::default()
            },
            model,
            train: TrainConfig {
                lr: 0.01,
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
            bench: BenchConfig::default(),
            timing: TimingConfig::default(),
            style: MapStyle::default(),
        }
    }
}

const SECTIONS: [&str; 12] = [
    "paths", "synth", "ingest", "tiling", "split", "augment", "model", "train", "inference", "bench", "timing", "style",
];
const SCALARS: [&str; 3] = ["schema_version", "seed", "threads"];

fn prefixed(section: &str, problems: Vec<String>) -> Vec<String> {
    problems
        .into_iter()
        .map(|p| {
            if p.starts_with(&format!("{section}.")) {
                p
            } else {
                format!("{section}: {p}")
            }
        })
        .collect()
}

impl PipelineConfig {
    /// Range and consistency violations, all of them.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        let s = &self.synth;
        if s.width == 0 || s.height == 0 || s.cell == 0 {
            out.push("synth: width, height and cell must be at least 1".into());
        }
        if !(s.noise_std >= 0.0 && s.noise_std.is_finite()) {
            out.push(format!("synth.noise_std must be finite and >= 0, got {}", s.noise_std));
        }
        if !s.texture_amplitude.is_finite() {
            out.push(format!("synth.texture_amplitude must be finite, got {}", s.texture_amplitude));
        }
        let g = &self.ingest;
        if g.start_date > g.end_date {
            out.push(format!(
                "ingest: start_date {} is after end_date {}",
                g.start_date, g.end_date
            ));
        }
        if !(0.0..=100.0).contains(&g.max_cloud_pct) {
            out.push(format!("ingest.max_cloud_pct must be in [0, 100], got {}", g.max_cloud_pct));
        }
        let t = &self.tiling;
        if t.tile_size == 0 {
            out.push("tiling.tile_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&t.min_valid_fraction) {
            out.push(format!(
                "tiling.min_valid_fraction must be in [0, 1], got {}",
                t.min_valid_fraction
            ));
        }
        if let Err(e) = self.split.validate() {
            out.push(format!("split: {e}"));
        }
        out.extend(prefixed("augment", self.augment.problems()));
        out.extend(prefixed("model", self.model.problems()));
        if self.augment.target_size != self.model.input_size {
            out.push(format!(
                "augment.target_size ({}) must equal model.input_size ({})",
                self.augment.target_size, self.model.input_size
            ));
        }
        out.extend(prefixed("train", self.train.problems()));
        let i = &self.inference;
        if !(0.0..=1.0).contains(&i.tau) {
            out.push(format!("inference.tau must be in [0, 1], got {}", i.tau));
        }
        if i.batch_size == 0 {
            out.push("inference.batch_size must be at least 1".into());
        }
        if i.png_scale == 0 {
            out.push("inference.png_scale must be at least 1".into());
        }
        let b = &self.bench;
        if b.measured_epochs == 0 {
            out.push("bench.measured_epochs must be at least 1".into());
        }
        if b.formats.is_empty() {
            out.push("bench.formats must name at least one format".into());
        }
        for r in &b.reference_records {
            out.extend(prefixed("bench.reference_records", r.problems()));
        }
        if !(self.timing.tick_ms > 0.0 && self.timing.tick_ms.is_finite()) {
            out.push(format!("timing.tick_ms must be positive, got {}", self.timing.tick_ms));
        }
        out.extend(prefixed("style", self.style.problems()));
        for (key, p) in [("paths.catalog", &self.paths.catalog), ("paths.roi", &self.paths.roi)] {
            if let Some(p) = p {
                if !p.exists() {
                    out.push(format!("{key}: {} does not exist", p.display()));
                }
            }
        }
        out
    }

    /// Settings that are legal but probably not intended.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.train.lr == 0.0 {
            out.push("train.lr is 0: training will leave the parameters at their initial values".into());
        }
        if self.ingest.max_cloud_pct == 0.0 {
            out.push("ingest.max_cloud_pct is 0: no scene can pass the cloud filter".into());
        }
        if self.inference.tau == 1.0 {
            out.push("inference.tau is 1: almost every prediction will be suppressed".into());
        }
        out
    }

    /// The config as TOML with every default filled in.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Stable hash of one section (or the whole document for `""`), used to
    /// tell whether a cached artifact was produced under the same settings.
    pub fn section_digest(&self, section: &str) -> String {
        let value = toml::Value::try_from(self).expect("config is always serializable");
        let part = if section.is_empty() {
            Some(&value)
        } else {
            value.get(section)
        };
        let text = part.map(|v| v.to_string()).unwrap_or_default();
        crate::pipeline::sha256_hex(text.as_bytes())
    }
}

/// Sets `key` (dotted, e.g. `train.lr`) in a parsed document. `raw` is read
/// as a TOML value when it parses as one and as a plain string otherwise.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(vec![format!("bad override key `{key}`")]));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("override `{key}`: `{p}` is not a section")]))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn section<T: DeserializeOwned + Default>(doc: &toml::Table, name: &str, problems: &mut Vec<String>) -> T {
    match doc.get(name) {
        None => T::default(),
        Some(v) => v.clone().try_into().unwrap_or_else(|e: toml::de::Error| {
            problems.push(format!("[{name}] {}", e.message().trim()));
            T::default()
        }),
    }
}

fn scalar<T: DeserializeOwned>(doc: &toml::Table, name: &str, fallback: T, problems: &mut Vec<String>) -> T {
    match doc.get(name) {
        None => fallback,
        Some(v) => v.clone().try_into().unwrap_or_else(|e: toml::de::Error| {
            problems.push(format!("{name}: {}", e.message().trim()));
            fallback
        }),
    }
}

/// Builds a config from a parsed document, reporting type errors per
/// section and every range violation in one list.
pub fn from_table(doc: &toml::Table) -> Result<PipelineConfig> {
    let mut problems = Vec::new();
    for key in doc.keys() {
        if !SECTIONS.contains(&key.as_str()) && !SCALARS.contains(&key.as_str()) {
            problems.push(format!("unknown key `{key}`"));
        }
    }
    let defaults = PipelineConfig::default();
    let augment_given = doc.get("augment").and_then(|a| a.get("target_size")).is_some();
    let model: NetworkConfig = section(doc, "model", &mut problems);
    let mut augment: AugmentationConfig = section(doc, "augment", &mut problems);
    if !augment_given {
        augment.target_size = model.input_size;
    }
    let mut train: TrainConfig = section(doc, "train", &mut problems);
    if doc.get("train").and_then(|t| t.get("lr")).is_none() {
        train.lr = defaults.train.lr;
    }
    let cfg = PipelineConfig {
        schema_version: scalar(doc, "schema_version", SCHEMA_VERSION, &mut problems),
        seed: scalar(doc, "seed", None, &mut problems),
        threads: scalar(doc, "threads", 0, &mut problems),
        paths: section(doc, "paths", &mut problems),
        synth: section(doc, "synth", &mut problems),
        ingest: section(doc, "ingest", &mut problems),
        tiling: section(doc, "tiling", &mut problems),
        split: section(doc, "split", &mut problems),
        augment,
        model,
        train,
        inference: section(doc, "inference", &mut problems),
        bench: section(doc, "bench", &mut problems),
        timing: section(doc, "timing", &mut problems),
        style: section(doc, "style", &mut problems),
    };
    problems.extend(cfg.problems());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

/// Parses config text; syntax errors carry the line and column.
pub fn parse_document(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| {
        let location = e
            .span()
            .map(|s| {
                let before = &text[..s.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                format!("{origin}:{line}:{col}")
            })
            .unwrap_or_else(|| origin.to_string());
        Error::parse(location, e.message().trim())
    })
}

/// Reads and checks a config file, applying `overrides` (`key`, `value`)
/// on top of it. Returns the config with defaults filled in, plus
/// warnings.
pub fn validate_config(path: &Path, overrides: &[(String, String)]) -> Result<(PipelineConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut doc = parse_document(&text, &path.display().to_string())?;
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    let cfg = from_table(&doc)?;
    let warnings = cfg.warnings();
    Ok((cfg, warnings))
}

/// Like [`validate_config`] without a file: defaults plus overrides.
pub fn config_from_overrides(overrides: &[(String, String)]) -> Result<(PipelineConfig, Vec<String>)> {
    let mut doc = toml::Table::new();
    for (k, v) in overrides {
        apply_override(&mut doc, k, v)?;
    }
    let cfg = from_table(&doc)?;
    let warnings = cfg.warnings();
    Ok((cfg, warnings))
}

/// Seed precedence: flag, config file, environment, default.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(vec![format!("{SEED_ENV}=`{v}` is not an unsigned integer")])),
        None => Ok(DEFAULT_SEED),
    }
}

/// Every dotted key the config accepts, for `--set` and the help text.
/// Arrays and maps are listed as a single key.
pub fn config_keys() -> Vec<String> {
    let mut cfg = PipelineConfig {
        seed: Some(0),
        ..PipelineConfig::default()
    };
    cfg.paths.catalog = Some(PathBuf::new());
    cfg.paths.roi = Some(PathBuf::new());
    cfg.inference.scene = Some(String::new());
    cfg.bench.device_name = Some(String::new());
    cfg.bench.baseline = Some(String::new());
    let value = toml::Value::try_from(&cfg).expect("config is always serializable");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    out
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) if !t.is_empty() && !prefix.ends_with("basis_overrides") => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Serializes a key list for help output, one `key = default` per line.
pub fn describe_keys() -> String {
    let defaults = toml::Value::try_from(PipelineConfig::default()).expect("config is always serializable");
    config_keys()
        .into_iter()
        .map(|k| {
            let mut v = Some(&defaults);
            for part in k.split('.') {
                v = v.and_then(|x| x.get(part));
            }
            match v {
                Some(v) => format!("  {k} = {v}"),
                None => format!("  {k} (unset)"),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}
