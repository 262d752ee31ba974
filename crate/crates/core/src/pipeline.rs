//! The staged pipeline behind the `lulc` subcommands.
//!
//! Each stage reads and writes fixed artifacts under the work directory:
//!
//! | stage    | reads                                  | writes                                   |
//! |----------|----------------------------------------|------------------------------------------|
//! | `synth`  |                                        | `scenes/` (containers, truth, catalog)   |
//! | `ingest` | catalog                                | `ingest/selected.csv`                    |
//! | `tile`   | selected scenes, ROI                   | `chips/`                                 |
//! | `stats`  | `chips/`                               | `stats.json`                             |
//! | `split`  | `chips/`                               | `split.json`                             |
//! | `train`  | chips, stats, split                    | `init.ckpt`, `model.ckpt`, `history.csv`, `train.json` |
//! | `eval`   | chips, stats, split, model             | `eval.json`, `confusion.csv`             |
//! | `infer`  | selected scenes, chips, stats, model   | `raster.csv`, `raster.png`, `inference.json` |
//! | `bench`  | chips, stats, split                    | `bench_record.json`                      |
//! | `report` | `bench_record.json`                    | `report/`                                |
//! | `map`    | `raster.csv`                           | `map/map.geojson`, `map/map.html`        |
//!
//! After a stage succeeds it writes `stamps/<stage>.json` with the SHA-256
//! of everything it read and wrote. A later stage that reads an artifact
//! checks it against the producer's stamp and refuses to run on a file that
//! changed underneath it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{Clock, FakeClock, MonotonicClock, TickClock};
use crate::config::{ClockKind, PipelineConfig, UuidMode};
use crate::dataset::{
    batch_iter, read_archive, stratified_split, with_prefetch, write_archive, BatchOptions, LabeledSet, Normalizer,
    SplitAssignment,
};
use crate::geo::catalog::{read_manifest, write_manifest};
use crate::geo::polygon::parse_geojson;
use crate::geo::scene_io::{import_png, read_scene, read_truth, write_scene, write_truth};
use crate::geo::{
    compute_channel_stats, filter_catalog, label_tiles, rasterize_mask, synth_scene, tile_scene, ChannelStats,
    ClassLayout, Mask, Scene, SceneMeta, SynthSpec, TileChip, TilingOptions, UuidGen,
};
use crate::infer::{
    majority_filter, predict_tiles, prepare_chips, read_raster_csv, stitch, threshold_suppress, write_raster_csv,
    write_raster_png, TileGrid,
};
use crate::map::{raster_to_geojson, render_html, write_geojson};
use crate::metrics::{emit_report, host_device_name, timed_run, BenchReport, ConfusionMatrix, DeviceRunRecord, Workload};
use crate::nn::{load_checkpoint, save_checkpoint, Network, OptimizerState};
use crate::train::{fit, train_epoch, validate, write_history, FitData, FitHooks, TrainConfig};
use crate::{seed, Error, Result, CLASS_NAMES, NUM_CLASSES};

pub const SCENES_DIR: &str = "scenes";
pub const CATALOG: &str = "scenes/catalog.csv";
pub const SELECTED: &str = "ingest/selected.csv";
pub const CHIPS: &str = "chips";
pub const STATS: &str = "stats.json";
pub const SPLIT: &str = "split.json";
pub const INIT_MODEL: &str = "init.ckpt";
pub const MODEL: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const TRAIN_SUMMARY: &str = "train.json";
pub const EVAL: &str = "eval.json";
pub const CONFUSION: &str = "confusion.csv";
pub const RASTER_CSV: &str = "raster.csv";
pub const RASTER_PNG: &str = "raster.png";
pub const INFER_SUMMARY: &str = "inference.json";
pub const BENCH_RECORD: &str = "bench_record.json";
pub const REPORT_DIR: &str = "report";
pub const GEOJSON: &str = "map/map.geojson";
pub const HTML: &str = "map/map.html";
pub const STAMPS_DIR: &str = "stamps";

pub const MAP_TITLE: &str = "Land-cover classification";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Ingest,
    Tile,
    Stats,
    Split,
    Train,
    Eval,
    Infer,
    Bench,
    Report,
    Map,
}

impl Stage {
    /// Every stage in pipeline order.
    pub const ALL: [Stage; 11] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Tile,
        Stage::Stats,
        Stage::Split,
        Stage::Train,
        Stage::Eval,
        Stage::Infer,
        Stage::Bench,
        Stage::Report,
        Stage::Map,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Tile => "tile",
            Stage::Stats => "stats",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Infer => "infer",
            Stage::Bench => "bench",
            Stage::Report => "report",
            Stage::Map => "map",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// SHA-256 of a file, or of a directory as the sorted list of its files'
/// relative names and digests.
pub fn artifact_digest(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return file_digest(path);
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        h.update(format!("{rel}\0{}\n", file_digest(&f)?).as_bytes());
    }
    Ok(hex(&h.finalize()))
}

/// Provenance of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// What a stage did, for the CLI to print.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub message: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stop_reason: String,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tiles: usize,
    pub overall_accuracy: Option<f64>,
    pub per_class_accuracy: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub scene_id: String,
    pub rows: usize,
    pub cols: usize,
    pub tiles: usize,
    pub suppressed: usize,
    pub tau: f64,
    pub filter_passes: usize,
    pub ms_per_tile: f64,
    pub tiles_per_s: f64,
}

#[derive(Default)]
struct Ctx {
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

/// A configured pipeline rooted at `paths.work_dir`.
pub struct Pipeline {
    cfg: PipelineConfig,
    seed: u64,
    work: PathBuf,
    clock: Box<dyn Clock>,
    progress: Option<Box<dyn Fn(&str)>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, seed: u64) -> Self {
        let clock: Box<dyn Clock> = match cfg.timing.clock {
            ClockKind::Monotonic => Box::new(MonotonicClock::new()),
            ClockKind::Tick => Box::new(TickClock::new(Duration::from_secs_f64(cfg.timing.tick_ms / 1000.0))),
        };
        Self {
            work: cfg.paths.work_dir.clone(),
            cfg,
            seed,
            clock,
            progress: None,
        }
    }

    /// Receives one line per epoch and per long step.
    pub fn with_progress(mut self, f: impl Fn(&str) + 'static) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn work_dir(&self) -> &Path {
        &self.work
    }

    /// Path of an artifact relative to the work directory.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.work.join(rel)
    }

    fn say(&self, msg: &str) {
        if let Some(p) = &self.progress {
            p(msg);
        }
    }

    pub fn run(&self, stage: Stage) -> Result<StageSummary> {
        let mut ctx = Ctx::default();
        let message = match stage {
            Stage::Synth => self.synth(&mut ctx),
            Stage::Ingest => self.ingest(&mut ctx),
            Stage::Tile => self.tile(&mut ctx),
            Stage::Stats => self.stats(&mut ctx),
            Stage::Split => self.split(&mut ctx),
            Stage::Train => self.train(&mut ctx),
            Stage::Eval => self.eval(&mut ctx),
            Stage::Infer => self.infer(&mut ctx),
            Stage::Bench => self.bench(&mut ctx),
            Stage::Report => self.report(&mut ctx),
            Stage::Map => self.map(&mut ctx),
        }?;
        let mut outputs = BTreeMap::new();
        for rel in &ctx.outputs {
            outputs.insert(rel.clone(), artifact_digest(&self.path(rel))?);
        }
        let stamp = Stamp {
            stage: stage.name().into(),
            seed: self.seed,
            config_digest: self.cfg.section_digest(""),
            inputs: ctx.inputs,
            outputs,
        };
        let dir = self.path(STAMPS_DIR);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join(format!("{}.json", stage.name())), &stamp)?;
        Ok(StageSummary {
            stage,
            message,
            outputs: ctx.outputs.iter().map(|r| self.path(r)).collect(),
        })
    }

    /// Runs `stages` in order, stopping at the first failure.
    pub fn run_all(&self, stages: &[Stage]) -> Result<Vec<StageSummary>> {
        stages.iter().map(|&s| self.run(s)).collect()
    }

    pub fn read_stamp(&self, stage: Stage) -> Result<Option<Stamp>> {
        let p = self.path(STAMPS_DIR).join(format!("{}.json", stage.name()));
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    /// Resolves an input artifact: it must exist, and if its producer left a
    /// stamp the content must still match it.
    fn input(&self, ctx: &mut Ctx, rel: &str, producer: Stage) -> Result<PathBuf> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: producer.name(),
            });
        }
        let digest = artifact_digest(&path)?;
        if let Some(stamp) = self.read_stamp(producer)? {
            if let Some(expected) = stamp.outputs.get(rel) {
                if *expected != digest {
                    return Err(Error::StaleArtifact {
                        path,
                        producer: producer.name(),
                    });
                }
            }
        }
        ctx.inputs.insert(rel.to_string(), digest);
        Ok(path)
    }

    fn external_input(&self, ctx: &mut Ctx, path: &Path) -> Result<()> {
        ctx.inputs.insert(path.display().to_string(), artifact_digest(path)?);
        Ok(())
    }

    fn output(&self, ctx: &mut Ctx, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        ctx.outputs.push(rel.to_string());
        Ok(path)
    }

    fn synth(&self, ctx: &mut Ctx) -> Result<String> {
        let s = &self.cfg.synth;
        let dir = self.path(SCENES_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut catalog = Vec::with_capacity(s.scenes);
        for i in 0..s.scenes {
            let layout = ClassLayout::Sequential {
                cell: s.cell,
                num_classes: NUM_CLASSES as u8,
                offset: i,
            };
            let spec = SynthSpec {
                noise_std: s.noise_std,
                texture_amplitude: s.texture_amplitude,
                ..SynthSpec::new(s.width, s.height, layout)
            };
            let (scene, truth) = synth_scene(seed::derive(self.seed, &format!("synth/{i}")), &spec);
            let name = format!("{}.hdr", scene.meta.scene_id);
            let hdr = dir.join(&name);
            write_scene(&scene, &hdr)?;
            write_truth(&truth, &hdr.with_extension("truth"))?;
            catalog.push(SceneMeta {
                path: name.into(),
                ..scene.meta
            });
        }
        write_manifest(&self.path(CATALOG), &catalog)?;
        ctx.outputs.push(SCENES_DIR.into());
        Ok(format!("{} scenes of {}x{} -> {}", s.scenes, s.width, s.height, dir.display()))
    }

    fn catalog_path(&self, ctx: &mut Ctx) -> Result<PathBuf> {
        match &self.cfg.paths.catalog {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact {
                        path: p.clone(),
                        producer: Stage::Synth.name(),
                    });
                }
                self.external_input(ctx, p)?;
                Ok(p.clone())
            }
            None => self.input(ctx, SCENES_DIR, Stage::Synth).map(|d| d.join("catalog.csv")),
        }
    }

    fn ingest(&self, ctx: &mut Ctx) -> Result<String> {
        let catalog_path = self.catalog_path(ctx)?;
        let catalog = read_manifest(&catalog_path)?;
        let g = &self.cfg.ingest;
        let base = catalog_path.parent().unwrap_or(Path::new("."));
        let selected: Vec<SceneMeta> = filter_catalog(&catalog, g.max_cloud_pct, g.start_date, g.end_date)?
            .into_iter()
            .map(|m| SceneMeta {
                path: if m.path.is_absolute() { m.path.clone() } else { base.join(&m.path) },
                ..m
            })
            .collect();
        if selected.is_empty() {
            return Err(Error::Empty(format!(
                "no scene in {} has cloud cover below {}% between {} and {}",
                catalog_path.display(),
                g.max_cloud_pct,
                g.start_date,
                g.end_date
            )));
        }
        write_manifest(&self.output(ctx, SELECTED)?, &selected)?;
        Ok(format!("{} of {} scenes selected", selected.len(), catalog.len()))
    }

    fn selected(&self, ctx: &mut Ctx) -> Result<Vec<SceneMeta>> {
        read_manifest(&self.input(ctx, SELECTED, Stage::Ingest)?)
    }

    fn load_scene(meta: &SceneMeta) -> Result<Scene> {
        let is_png = meta.path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            import_png(&meta.path, &meta.path.with_extension("hdr"))
        } else {
            read_scene(&meta.path)
        }
    }

    fn tile(&self, ctx: &mut Ctx) -> Result<String> {
        let scenes = self.selected(ctx)?;
        let roi = match &self.cfg.paths.roi {
            Some(p) => {
                self.external_input(ctx, p)?;
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Some(parse_geojson(&text)?)
            }
            None => None,
        };
        let t = &self.cfg.tiling;
        let opts = TilingOptions {
            tile_size: t.tile_size,
            min_valid_fraction: t.min_valid_fraction,
        };
        let mut uuids = match t.uuids {
            UuidMode::Seeded => UuidGen::seeded(self.seed),
            UuidMode::Random => UuidGen::random(),
        };
        let mut chips = Vec::new();
        let mut transforms = BTreeMap::new();
        let mut unlabeled = 0;
        for meta in &scenes {
            let scene = Self::load_scene(meta)?;
            let mask = match &roi {
                Some(r) => rasterize_mask(&scene, r),
                None => Mask {
                    width: scene.width,
                    height: scene.height,
                    cells: scene.nodata_mask.clone(),
                },
            };
            let mut tiles = tile_scene(&scene, &mask, &opts, &mut uuids)?;
            let truth = meta.path.with_extension("truth");
            if truth.exists() {
                label_tiles(&mut tiles, &read_truth(&truth, scene.width, scene.height)?);
            }
            unlabeled += tiles.iter().filter(|c| c.label.is_none()).count();
            transforms.insert(scene.meta.scene_id.clone(), scene.geotransform);
            chips.extend(tiles);
        }
        if chips.is_empty() {
            return Err(Error::Empty("tiling produced no chips".into()));
        }
        let dir = self.output(ctx, CHIPS)?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_archive(&dir, &chips, &transforms)?;
        Ok(format!(
            "{} chips ({} unlabeled) from {} scenes",
            chips.len(),
            unlabeled,
            scenes.len()
        ))
    }

    fn chips(&self, ctx: &mut Ctx) -> Result<Vec<TileChip>> {
        read_archive(&self.input(ctx, CHIPS, Stage::Tile)?)
    }

    fn labeled(&self, ctx: &mut Ctx) -> Result<LabeledSet> {
        let chips: Vec<TileChip> = self.chips(ctx)?.into_iter().filter(|c| c.label.is_some()).collect();
        if chips.is_empty() {
            return Err(Error::Empty("the chip archive has no labeled chips".into()));
        }
        LabeledSet::new(chips)
    }

    fn stats(&self, ctx: &mut Ctx) -> Result<String> {
        let chips = self.chips(ctx)?;
        let stats = compute_channel_stats(&chips)?;
        write_json(&self.output(ctx, STATS)?, &stats)?;
        Ok(format!("mean {:.4?} std {:.4?} over {} chips", stats.mean, stats.std, chips.len()))
    }

    fn normalizer(&self, ctx: &mut Ctx) -> Result<Normalizer> {
        let stats: ChannelStats = read_json(&self.input(ctx, STATS, Stage::Stats)?)?;
        Normalizer::new(self.cfg.augment.norm_profile, Some(&stats))
    }

    fn split(&self, ctx: &mut Ctx) -> Result<String> {
        let set = self.labeled(ctx)?;
        let split = stratified_split(&set, self.cfg.split, self.seed)?;
        write_json(&self.output(ctx, SPLIT)?, &split)?;
        Ok(format!(
            "train {} / val {} / test {}",
            split.train_idx.len(),
            split.val_idx.len(),
            split.test_idx.len()
        ))
    }

    fn load_split(&self, ctx: &mut Ctx, set: &LabeledSet) -> Result<SplitAssignment> {
        let split: SplitAssignment = read_json(&self.input(ctx, SPLIT, Stage::Split)?)?;
        split.validate(set.len())?;
        Ok(split)
    }

    fn train(&self, ctx: &mut Ctx) -> Result<String> {
        let set = self.labeled(ctx)?;
        let split = self.load_split(ctx, &set)?;
        let normalizer = self.normalizer(ctx)?;
        let cfg = &self.cfg.train;
        let net = Network::init(&self.cfg.model, self.seed)?;
        let init_opt = net.optimizer(cfg.lr, cfg.momentum)?;
        save_checkpoint(&net, &init_opt, 0, &self.output(ctx, INIT_MODEL)?)?;
        let parameters = net.num_parameters();
        let data = FitData {
            set: &set,
            split: &split,
            augment: &self.cfg.augment,
            normalizer: &normalizer,
            seed: self.seed,
        };
        let hooks = FitHooks {
            val_loss: None,
            on_epoch: Some(Box::new(|r| {
                self.say(&format!(
                    "epoch {:>3}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3} | {:.1} s",
                    r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.epoch_seconds
                ))
            })),
        };
        let out = fit(net, cfg, &data, self.clock.as_ref(), hooks)?;
        save_checkpoint(&out.best, &out.best_optimizer, out.best_epoch, &self.output(ctx, MODEL)?)?;
        write_history(&self.output(ctx, HISTORY)?, &out.history)?;
        let best_val_loss = out
            .history
            .iter()
            .find(|r| r.epoch == out.best_epoch)
            .map_or(f64::NAN, |r| r.val_loss);
        let summary = TrainSummary {
            seed: self.seed,
            parameters,
            epochs_run: out.history.len(),
            best_epoch: out.best_epoch,
            stop_reason: out.stop_reason.to_string(),
            best_val_loss,
        };
        write_json(&self.output(ctx, TRAIN_SUMMARY)?, &summary)?;
        Ok(format!(
            "{} epochs ({}), best epoch {} with val loss {:.4}",
            summary.epochs_run, summary.stop_reason, summary.best_epoch, best_val_loss
        ))
    }

    fn model(&self, ctx: &mut Ctx) -> Result<Network<f32>> {
        let p = self.input(ctx, MODEL, Stage::Train)?;
        Ok(load_checkpoint(&p, Some(&self.cfg.model))?.network)
    }

    fn eval(&self, ctx: &mut Ctx) -> Result<String> {
        let set = self.labeled(ctx)?;
        let split = self.load_split(ctx, &set)?;
        let normalizer = self.normalizer(ctx)?;
        let net = self.model(ctx)?;
        let chips: Vec<TileChip> = split.test_idx.iter().map(|&i| set.chips[i].clone()).collect();
        if chips.is_empty() {
            return Err(Error::Empty("the test split is empty".into()));
        }
        let inputs = prepare_chips(&chips, &self.cfg.augment, &normalizer)?;
        let (preds, _) = predict_tiles(&net, &inputs, self.cfg.inference.batch_size, self.clock.as_ref())?;
        let mut cm = ConfusionMatrix::new();
        for (&i, p) in split.test_idx.iter().zip(&preds) {
            cm.update(set.label(i), p.class_id.map_or(0, usize::from))?;
        }
        let per_class = cm.per_class_accuracy();
        let summary = EvalSummary {
            tiles: chips.len(),
            overall_accuracy: cm.overall_accuracy(),
            per_class_accuracy: CLASS_NAMES
                .iter()
                .zip(per_class)
                .map(|(n, a)| (n.to_string(), a))
                .collect(),
        };
        write_json(&self.output(ctx, EVAL)?, &summary)?;
        cm.write_csv(&self.output(ctx, CONFUSION)?)?;
        Ok(format!(
            "test accuracy {:.4} on {} tiles",
            summary.overall_accuracy.unwrap_or(0.0),
            summary.tiles
        ))
    }

    fn infer(&self, ctx: &mut Ctx) -> Result<String> {
        let scenes = self.selected(ctx)?;
        let meta = match &self.cfg.inference.scene {
            Some(id) => scenes
                .iter()
                .find(|m| &m.scene_id == id)
                .ok_or_else(|| Error::invalid(format!("inference.scene `{id}` is not among the ingested scenes")))?,
            None => scenes.first().ok_or_else(|| Error::Empty("no ingested scenes".into()))?,
        };
        let scene = Self::load_scene(meta)?;
        let chips: Vec<TileChip> = self
            .chips(ctx)?
            .into_iter()
            .filter(|c| c.scene_id == scene.meta.scene_id)
            .collect();
        let normalizer = self.normalizer(ctx)?;
        let net = self.model(ctx)?;
        let i = &self.cfg.inference;
        let inputs = prepare_chips(&chips, &self.cfg.augment, &normalizer)?;
        let (preds, timing) = predict_tiles(&net, &inputs, i.batch_size, self.clock.as_ref())?;
        let kept = threshold_suppress(&preds, i.tau)?;
        let suppressed = kept.iter().filter(|p| p.class_id.is_none()).count();
        let grid = TileGrid::for_scene(&scene, self.cfg.tiling.tile_size);
        let raster = majority_filter(&stitch(&chips, &kept, &grid)?, i.filter_passes)?;
        write_raster_csv(&self.output(ctx, RASTER_CSV)?, &raster)?;
        write_raster_png(
            &self.output(ctx, RASTER_PNG)?,
            &raster,
            &self.cfg.style.palette_rgb()?,
            i.png_scale,
        )?;
        let summary = InferSummary {
            scene_id: scene.meta.scene_id.clone(),
            rows: raster.rows,
            cols: raster.cols,
            tiles: chips.len(),
            suppressed,
            tau: i.tau,
            filter_passes: i.filter_passes,
            ms_per_tile: timing.ms_per_tile,
            tiles_per_s: timing.tiles_per_s,
        };
        write_json(&self.output(ctx, INFER_SUMMARY)?, &summary)?;
        Ok(format!(
            "{}: {} tiles, {} suppressed, {:.2} ms/tile",
            summary.scene_id, summary.tiles, suppressed, timing.ms_per_tile
        ))
    }

    fn bench(&self, ctx: &mut Ctx) -> Result<String> {
        let set = self.labeled(ctx)?;
        let split = self.load_split(ctx, &set)?;
        let normalizer = self.normalizer(ctx)?;
        let b = &self.cfg.bench;
        let net = Network::init(&self.cfg.model, self.seed)?;
        let opt = net.optimizer(self.cfg.train.lr, self.cfg.train.momentum)?;
        let data = FitData {
            set: &set,
            split: &split,
            augment: &self.cfg.augment,
            normalizer: &normalizer,
            seed: self.seed,
        };
        let mut workload = BenchWorkload {
            net,
            opt,
            cfg: &self.cfg.train,
            data: &data,
            train_batches: b.train_batches,
            val_batches: b.val_batches,
        };
        let device = b.device_name.clone().unwrap_or_else(host_device_name);
        self.say(&format!(
            "bench: {} warm-up + {} measured epochs on {device}",
            b.warmup_epochs, b.measured_epochs
        ));
        let mut record = timed_run(
            &mut workload,
            self.clock.as_ref(),
            &device,
            b.warmup_epochs,
            b.measured_epochs,
        )?;
        let take = if b.inference_tiles == 0 {
            split.test_idx.len()
        } else {
            b.inference_tiles.min(split.test_idx.len())
        };
        if take > 0 {
            let chips: Vec<TileChip> = split.test_idx[..take].iter().map(|&i| set.chips[i].clone()).collect();
            let inputs = prepare_chips(&chips, &self.cfg.augment, &normalizer)?;
            let (_, timing) = predict_tiles(
                &workload.net,
                &inputs,
                self.cfg.inference.batch_size,
                self.clock.as_ref(),
            )?;
            record = record.with_inference(timing.ms_per_tile);
        }
        write_json(&self.output(ctx, BENCH_RECORD)?, &record)?;
        Ok(format!(
            "{}: train {:.3} it/s, val {:.3} it/s, epoch {:.2} s",
            record.device_name, record.train_it_s, record.val_it_s, record.epoch_seconds
        ))
    }

    fn report(&self, ctx: &mut Ctx) -> Result<String> {
        let host: DeviceRunRecord = read_json(&self.input(ctx, BENCH_RECORD, Stage::Bench)?)?;
        let b = &self.cfg.bench;
        let baseline = b.baseline.clone().unwrap_or_else(|| host.device_name.clone());
        let mut records = b.reference_records.clone();
        records.push(host);
        let report = BenchReport::build(&baseline, records, b.basis, &b.basis_overrides)?;
        let dir = self.path(REPORT_DIR);
        let written = emit_report(&report, &dir, &b.formats, b.chart_data)?;
        for p in &written {
            let rel = p.strip_prefix(&self.work).unwrap_or(p).to_string_lossy().replace('\\', "/");
            ctx.outputs.push(rel);
        }
        let speedups: Vec<String> = report
            .speedups
            .iter()
            .map(|s| format!("{} {}x ({})", s.device, s.display, s.basis.as_str()))
            .collect();
        Ok(format!("baseline {baseline}; {}", speedups.join(", ")))
    }

    fn map(&self, ctx: &mut Ctx) -> Result<String> {
        let raster = read_raster_csv(&self.input(ctx, RASTER_CSV, Stage::Infer)?)?;
        let fc = raster_to_geojson(&raster, &self.cfg.style)?;
        write_geojson(&self.output(ctx, GEOJSON)?, &fc)?;
        render_html(&fc, &self.cfg.style, MAP_TITLE, &self.output(ctx, HTML)?)?;
        Ok(format!("{} features", fc.features.len()))
    }
}

/// Training and validation passes over a bounded number of batches, as
/// timed by the benchmark.
struct BenchWorkload<'a> {
    net: Network<f32>,
    opt: OptimizerState<f32>,
    cfg: &'a TrainConfig,
    data: &'a FitData<'a>,
    train_batches: usize,
    val_batches: usize,
}

fn limit(n: usize) -> usize {
    if n == 0 {
        usize::MAX
    } else {
        n
    }
}

impl Workload for BenchWorkload<'_> {
    fn train_pass(&mut self, epoch: usize) -> Result<usize> {
        let d = self.data;
        let opts = BatchOptions {
            batch_size: self.cfg.batch_size,
            shuffle: true,
            augment: true,
        };
        let it = batch_iter(d.set, &d.split.train_idx, opts, d.augment, d.normalizer, d.seed, epoch)?
            .take(limit(self.train_batches));
        // the harness owns the timing; the pass itself runs on a frozen clock
        let frozen = FakeClock::new();
        let (net, opt) = (&mut self.net, &mut self.opt);
        let stats = with_prefetch(it, self.cfg.prefetch, |b| train_epoch(net, opt, b, epoch, &frozen))?;
        Ok(stats.iters)
    }

    fn val_pass(&mut self, _epoch: usize) -> Result<usize> {
        let d = self.data;
        let opts = BatchOptions {
            batch_size: self.cfg.batch_size,
            shuffle: false,
            augment: false,
        };
        let it = batch_iter(d.set, &d.split.val_idx, opts, d.augment, d.normalizer, d.seed, 0)?
            .take(limit(self.val_batches));
        let frozen = FakeClock::new();
        let net = &self.net;
        let stats = with_prefetch(it, self.cfg.prefetch, |b| validate(net, b, &frozen))?;
        Ok(stats.iters)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display(), e))
}
