//! Tile-level prediction, confidence suppression, majority smoothing and
//! stitching into a class raster.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::dataset::{eval_input, AugmentationConfig, Normalizer};
use crate::geo::tiling::grid_dims;
use crate::geo::{Bounds, GeoTransform, Scene, TileChip};
use crate::nn::{Network, Tensor};
use crate::{par, Error, Result, NUM_CLASSES};

/// Default confidence threshold; predictions strictly below it are dropped.
pub const DEFAULT_TAU: f64 = 0.6;

/// Class id written for suppressed cells in CSV output.
pub const SUPPRESSED_CSV: i16 = -1;

/// Default class colours (RGB), indexed by class id.
pub const DEFAULT_PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0xe6, 0x19, 0x4b],
    [0x3c, 0xb4, 0x4b],
    [0xff, 0xe1, 0x19],
    [0x43, 0x63, 0xd8],
    [0xf5, 0x82, 0x31],
    [0x91, 0x1e, 0xb4],
    [0x42, 0xd4, 0xf4],
    [0xf0, 0x32, 0xe6],
    [0xbf, 0xef, 0x45],
    [0x46, 0x99, 0x90],
];

/// Colour of suppressed cells in raster images.
pub const SUPPRESSED_RGB: [u8; 3] = [0x80, 0x80, 0x80];

/// One tile's prediction. `class_id` is `None` once suppressed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilePrediction {
    pub class_id: Option<u8>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictTiming {
    pub tiles: usize,
    pub total_seconds: f64,
    pub ms_per_tile: f64,
    pub tiles_per_s: f64,
}

impl PredictTiming {
    pub fn new(tiles: usize, total_seconds: f64) -> Self {
        let (ms_per_tile, tiles_per_s) = if tiles > 0 && total_seconds > 0.0 {
            (1000.0 * total_seconds / tiles as f64, tiles as f64 / total_seconds)
        } else {
            (0.0, 0.0)
        };
        Self {
            tiles,
            total_seconds,
            ms_per_tile,
            tiles_per_s,
        }
    }
}

/// Stacks the eval-time inputs of `chips` into an `N x C x T x T` tensor.
pub fn prepare_chips(chips: &[TileChip], cfg: &AugmentationConfig, norm: &Normalizer) -> Result<Tensor<f32>> {
    let first = chips.first().ok_or_else(|| Error::Empty("no chips to predict".into()))?;
    if let Some(c) = chips.iter().find(|c| c.bands != first.bands || c.size != first.size) {
        return Err(Error::Shape(format!(
            "chip {} is {}x{}x{}, expected {}x{}x{}",
            c.uuid, c.bands, c.size, c.size, first.bands, first.size, first.size
        )));
    }
    norm.check_bands(first.bands)?;
    let samples = par::map_slice(chips, |c| eval_input(c, cfg, norm));
    let data = samples.into_iter().collect::<Result<Vec<_>>>()?.concat();
    let t = cfg.target_size;
    Tensor::new(vec![chips.len(), first.bands, t, t], data)
}

/// Argmax class and max softmax probability per row of `probs`.
fn decode(probs: &[f32], k: usize) -> Vec<TilePrediction> {
    probs
        .chunks(k)
        .map(|row| {
            let (class, p) = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            TilePrediction {
                class_id: Some(class as u8),
                confidence: f64::from(p),
            }
        })
        .collect()
}

/// Predicts every sample of `inputs` in chunks of `batch_size`. Eval-mode
/// networks treat samples independently, so the result does not depend on
/// the batch size.
pub fn predict_tiles(
    net: &Network<f32>,
    inputs: &Tensor<f32>,
    batch_size: usize,
    clock: &dyn Clock,
) -> Result<(Vec<TilePrediction>, PredictTiming)> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let (n, c, h, w) = inputs.dims4()?;
    let per = c * h * w;
    let start = clock.now();
    let mut out = Vec::with_capacity(n);
    for lo in (0..n).step_by(batch_size) {
        let hi = (lo + batch_size).min(n);
        let x = Tensor::new(vec![hi - lo, c, h, w], inputs.data()[lo * per..hi * per].to_vec())?;
        let probs = net.predict(&x)?;
        out.extend(decode(probs.data(), probs.shape()[1]));
    }
    let timing = PredictTiming::new(n, clock.seconds_since(start));
    Ok((out, timing))
}

/// Drops predictions whose confidence is strictly below `tau`.
pub fn threshold_suppress(preds: &[TilePrediction], tau: f64) -> Result<Vec<TilePrediction>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must be in [0, 1], got {tau}")));
    }
    Ok(preds
        .iter()
        .map(|p| TilePrediction {
            class_id: if p.confidence < tau { None } else { p.class_id },
            confidence: p.confidence,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub class_id: Option<u8>,
    pub confidence: f64,
    /// Empty for grid cells without a tile.
    pub uuid: String,
    pub bounds: Bounds,
}

/// Row-major grid of tile predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRaster {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Cell>,
}

impl ClassRaster {
    pub fn get(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.cols + col]
    }

    pub fn classes(&self) -> Vec<Option<u8>> {
        self.cells.iter().map(|c| c.class_id).collect()
    }

    /// Cells per class id; index [`NUM_CLASSES`] counts suppressed cells.
    pub fn class_histogram(&self) -> [usize; NUM_CLASSES + 1] {
        let mut h = [0; NUM_CLASSES + 1];
        for c in &self.cells {
            h[c.class_id.map_or(NUM_CLASSES, usize::from).min(NUM_CLASSES)] += 1;
        }
        h
    }
}

/// Tile grid of one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub geotransform: GeoTransform,
}

impl TileGrid {
    pub fn for_scene(scene: &Scene, tile_size: usize) -> Self {
        let (rows, cols) = grid_dims(scene.width, scene.height, tile_size);
        Self {
            rows,
            cols,
            tile_size,
            geotransform: scene.geotransform,
        }
    }

    fn cell_bounds(&self, row: usize, col: usize) -> Bounds {
        let s = self.tile_size;
        self.geotransform.block_bounds(row * s, col * s, s, s)
    }
}

/// Places each chip's prediction at its grid cell. Cells without a chip are
/// suppressed with confidence 0 and bounds from the grid geotransform.
pub fn stitch(chips: &[TileChip], preds: &[TilePrediction], grid: &TileGrid) -> Result<ClassRaster> {
    if chips.len() != preds.len() {
        return Err(Error::Shape(format!("{} chips but {} predictions", chips.len(), preds.len())));
    }
    let mut slots: Vec<Option<usize>> = vec![None; grid.rows * grid.cols];
    for (i, chip) in chips.iter().enumerate() {
        if chip.size != grid.tile_size || chip.row_off % chip.size != 0 || chip.col_off % chip.size != 0 {
            return Err(Error::Shape(format!(
                "chip {} at ({}, {}) with size {} is not on the {}-pixel tile grid",
                chip.uuid, chip.row_off, chip.col_off, chip.size, grid.tile_size
            )));
        }
        let (r, c) = chip.grid_cell();
        if r >= grid.rows || c >= grid.cols {
            return Err(Error::Index(format!(
                "chip {} lands at grid cell ({r}, {c}) outside a {}x{} grid",
                chip.uuid, grid.rows, grid.cols
            )));
        }
        let slot = &mut slots[r * grid.cols + c];
        if let Some(j) = *slot {
            let (a, b) = if chips[j].uuid <= chip.uuid { (j, i) } else { (i, j) };
            return Err(Error::DuplicateCell {
                row: r,
                col: c,
                first: chips[a].uuid.clone(),
                second: chips[b].uuid.clone(),
            });
        }
        *slot = Some(i);
    }
    let cells = slots
        .iter()
        .enumerate()
        .map(|(k, slot)| match *slot {
            Some(i) => Cell {
                class_id: preds[i].class_id,
                confidence: preds[i].confidence,
                uuid: chips[i].uuid.clone(),
                bounds: chips[i].bounds,
            },
            None => Cell {
                class_id: None,
                confidence: 0.0,
                uuid: String::new(),
                bounds: grid.cell_bounds(k / grid.cols, k % grid.cols),
            },
        })
        .collect();
    Ok(ClassRaster {
        rows: grid.rows,
        cols: grid.cols,
        cells,
    })
}

/// Mode of the 3x3 neighbourhood (centre included, suppressed cells not
/// voting). Ties at the maximum keep `classes[r][c]`, and suppressed cells
/// stay suppressed. Every cell reads the input grid.
pub fn majority_filter_classes(classes: &[Option<u8>], rows: usize, cols: usize) -> Vec<Option<u8>> {
    let rows_out = par::map_range(rows, |r| {
        (0..cols)
            .map(|c| {
                let own = classes[r * cols + c]?;
                let mut votes = [0u16; 256];
                for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                    for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                        if let Some(k) = classes[rr * cols + cc] {
                            votes[k as usize] += 1;
                        }
                    }
                }
                let top = *votes.iter().max().expect("256 entries");
                let winners = votes.iter().filter(|&&v| v == top).count();
                if winners > 1 {
                    Some(own)
                } else {
                    Some(votes.iter().position(|&v| v == top).expect("a maximum exists") as u8)
                }
            })
            .collect::<Vec<_>>()
    });
    rows_out.concat()
}

/// Applies [`majority_filter_classes`] `passes` times; confidences,
/// UUIDs and bounds are kept.
pub fn majority_filter(raster: &ClassRaster, passes: usize) -> Result<ClassRaster> {
    if raster.cells.is_empty() {
        return Err(Error::Empty("majority filter on an empty raster".into()));
    }
    let mut classes = raster.classes();
    for _ in 0..passes {
        classes = majority_filter_classes(&classes, raster.rows, raster.cols);
    }
    let mut out = raster.clone();
    out.cells.iter_mut().zip(classes).for_each(|(cell, k)| cell.class_id = k);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvCell {
    row: usize,
    col: usize,
    class_id: i16,
    confidence: f64,
    uuid: String,
    min_lon: f64,
    min_lat: f64,
    max_lon: f64,
    max_lat: f64,
}

/// Writes one CSV line per cell in row-major order; suppressed cells carry
/// class id -1.
pub fn write_raster_csv(path: &Path, raster: &ClassRaster) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for (k, cell) in raster.cells.iter().enumerate() {
        w.serialize(CsvCell {
            row: k / raster.cols,
            col: k % raster.cols,
            class_id: cell.class_id.map_or(SUPPRESSED_CSV, i16::from),
            confidence: cell.confidence,
            uuid: cell.uuid.clone(),
            min_lon: cell.bounds.min_lon,
            min_lat: cell.bounds.min_lat,
            max_lon: cell.bounds.max_lon,
            max_lat: cell.bounds.max_lat,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display(), format!("{other:?}")),
    }
}

/// Reads a raster written by [`write_raster_csv`]; every grid cell must
/// appear exactly once.
pub fn read_raster_csv(path: &Path) -> Result<ClassRaster> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let rows: Vec<CsvCell> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(path, e))?;
    let bad = |m: String| Error::parse(path.display(), m);
    if rows.is_empty() {
        return Err(bad("raster CSV has no cells".into()));
    }
    let nr = rows.iter().map(|c| c.row).max().unwrap_or(0) + 1;
    let nc = rows.iter().map(|c| c.col).max().unwrap_or(0) + 1;
    let mut cells: Vec<Option<Cell>> = vec![None; nr * nc];
    for c in rows {
        let class_id = match c.class_id {
            SUPPRESSED_CSV => None,
            k if (0..NUM_CLASSES as i16).contains(&k) => Some(k as u8),
            k => return Err(bad(format!("class id {k} at ({}, {}) is out of range", c.row, c.col))),
        };
        if !(0.0..=1.0).contains(&c.confidence) {
            return Err(bad(format!("confidence {} at ({}, {}) is outside [0, 1]", c.confidence, c.row, c.col)));
        }
        let slot = &mut cells[c.row * nc + c.col];
        if slot.is_some() {
            return Err(bad(format!("cell ({}, {}) appears twice", c.row, c.col)));
        }
        *slot = Some(Cell {
            class_id,
            confidence: c.confidence,
            uuid: c.uuid,
            bounds: Bounds {
                min_lon: c.min_lon,
                min_lat: c.min_lat,
                max_lon: c.max_lon,
                max_lat: c.max_lat,
            },
        });
    }
    let cells = cells
        .into_iter()
        .enumerate()
        .map(|(k, c)| c.ok_or_else(|| bad(format!("cell ({}, {}) is missing", k / nc, k % nc))))
        .collect::<Result<_>>()?;
    Ok(ClassRaster { rows: nr, cols: nc, cells })
}

/// Writes an 8-bit paletted PNG with `scale x scale` pixels per cell.
/// Palette entries 0..10 are the classes, entry 10 marks suppressed cells.
pub fn write_raster_png(path: &Path, raster: &ClassRaster, palette: &[[u8; 3]; NUM_CLASSES], scale: usize) -> Result<()> {
    let scale = scale.max(1);
    let (w, h) = (raster.cols * scale, raster.rows * scale);
    let too_big = || Error::invalid(format!("image {w}x{h} is too large"));
    let mut pal: Vec<u8> = palette.iter().flatten().copied().collect();
    pal.extend_from_slice(&SUPPRESSED_RGB);
    let mut pixels = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let class = raster.get(r / scale, c / scale).class_id;
            pixels.push(class.map_or(NUM_CLASSES as u8, |k| k.min(NUM_CLASSES as u8)));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), u32::try_from(w).map_err(|_| too_big())?, u32::try_from(h).map_err(|_| too_big())?);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(pal);
    let png_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::invalid(format!("PNG encoding failed: {other}")),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{FakeClock, TickClock};
    use crate::geo::{Mask, SceneMeta, TilingOptions, UuidGen};
    use crate::nn::NetworkConfig;
    use crate::seed;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use std::time::Duration;

    fn gt() -> GeoTransform {
        GeoTransform {
            origin_lon: 10.0,
            origin_lat: 50.0,
            pixel_width: 0.001,
            pixel_height: -0.001,
        }
    }

    fn scene(w: usize, h: usize) -> Scene {
        let meta = SceneMeta {
            scene_id: "s1".into(),
            acquisition_date: chrono::NaiveDate::from_ymd_opt(2024, 6, 1).unwrap(),
            cloud_cover_pct: 1.0,
            path: "s1".into(),
        };
        let pixels = (0..3 * w * h).map(|i| (i % 97) as f32 / 97.0).collect();
        Scene::new(meta, w, h, 3, pixels, vec![true; w * h], gt()).unwrap()
    }

    fn tiles(sc: &Scene, size: usize, mask: &Mask) -> Vec<TileChip> {
        let opts = TilingOptions {
            tile_size: size,
            min_valid_fraction: 1.0,
        };
        crate::geo::tile_scene(sc, mask, &opts, &mut UuidGen::seeded(1)).unwrap()
    }

    fn pred(k: u8, p: f64) -> TilePrediction {
        TilePrediction {
            class_id: Some(k),
            confidence: p,
        }
    }

    #[test]
    fn predictions_ignore_batch_size() {
        let mut rng = seed::rng(3, "infer-batch");
        let cfg = NetworkConfig::tiny();
        let net = Network::<f32>::init(&cfg, 5).unwrap();
        let x = Tensor::new(vec![37, 3, 8, 8], (0..37 * 192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let clock = FakeClock::new();
        let (p1, _) = predict_tiles(&net, &x, 1, &clock).unwrap();
        for bs in [16, 32, 37, 100] {
            let (p, _) = predict_tiles(&net, &x, bs, &clock).unwrap();
            for (a, b) in p1.iter().zip(&p) {
                assert_eq!(a.class_id, b.class_id);
                assert!((a.confidence - b.confidence).abs() <= 1e-6);
            }
        }
        assert_eq!(predict_tiles(&net, &x, 16, &clock).unwrap().0, predict_tiles(&net, &x, 16, &clock).unwrap().0);
    }

    #[test]
    fn prediction_is_argmax_of_softmax() {
        let net = Network::<f32>::init(&NetworkConfig::tiny(), 6).unwrap();
        let mut rng = seed::rng(4, "infer-argmax");
        let x = Tensor::new(vec![5, 3, 8, 8], (0..5 * 192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let probs = net.predict(&x).unwrap();
        let (p, _) = predict_tiles(&net, &x, 2, &FakeClock::new()).unwrap();
        for (row, tp) in probs.data().chunks(10).zip(&p) {
            let max = row.iter().cloned().fold(f32::MIN, f32::max);
            assert_eq!(tp.confidence, f64::from(max));
            assert_eq!(row[tp.class_id.unwrap() as usize], max);
        }
    }

    #[test]
    fn timing_is_self_consistent() {
        let net = Network::<f32>::zeros(&NetworkConfig::tiny()).unwrap();
        let x = Tensor::zeros(&[10, 3, 8, 8]);
        let clock = TickClock::new(Duration::from_millis(250));
        let (_, t) = predict_tiles(&net, &x, 4, &clock).unwrap();
        assert_eq!(t.tiles, 10);
        assert!((t.tiles_per_s - 10.0 / t.total_seconds).abs() <= 0.02 * t.tiles_per_s);
        assert!((t.ms_per_tile - 1000.0 * t.total_seconds / 10.0).abs() < 1e-9);
        assert_eq!(PredictTiming::new(3, 0.0).tiles_per_s, 0.0);
    }

    #[test]
    fn threshold_boundaries() {
        let preds = vec![pred(1, 0.6), pred(2, 0.5999999), pred(3, 1.0), pred(4, 0.0)];
        let out = threshold_suppress(&preds, 0.6).unwrap();
        assert_eq!(out.iter().map(|p| p.class_id).collect::<Vec<_>>(), vec![Some(1), None, Some(3), None]);
        assert_eq!(threshold_suppress(&preds, 0.0).unwrap(), preds);
        assert!(threshold_suppress(&preds, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn suppression_matches_scan_and_is_monotone(confs in prop::collection::vec(0.0f64..=1.0, 0..60), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let preds: Vec<_> = confs.iter().map(|&c| pred(7, c)).collect();
            let a = threshold_suppress(&preds, t1).unwrap();
            let mut expected = Vec::new();
            for (i, &c) in confs.iter().enumerate() {
                if c < t1 {
                    expected.push(i);
                }
            }
            let got: Vec<usize> = a.iter().enumerate().filter(|(_, p)| p.class_id.is_none()).map(|(i, _)| i).collect();
            prop_assert_eq!(got, expected);
            prop_assert_eq!(threshold_suppress(&a, t1).unwrap(), a.clone());
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let l = threshold_suppress(&preds, lo).unwrap();
            let h = threshold_suppress(&preds, hi).unwrap();
            for (x, y) in l.iter().zip(&h) {
                prop_assert!(x.class_id.is_some() || y.class_id.is_none());
            }
        }
    }

    /// Per-cell mode written from the definition, one neighbour at a time.
    fn oracle(classes: &[Option<u8>], rows: usize, cols: usize) -> Vec<Option<u8>> {
        let mut out = Vec::new();
        for r in 0..rows as i64 {
            for c in 0..cols as i64 {
                let own = classes[(r * cols as i64 + c) as usize];
                let Some(own) = own else {
                    out.push(None);
                    continue;
                };
                let mut counts = std::collections::HashMap::new();
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                            continue;
                        }
                        if let Some(k) = classes[(rr * cols as i64 + cc) as usize] {
                            *counts.entry(k).or_insert(0) += 1;
                        }
                    }
                }
                let best = counts.values().max().copied().unwrap();
                let tops: Vec<u8> = counts.iter().filter(|(_, &v)| v == best).map(|(&k, _)| k).collect();
                out.push(Some(if tops.len() == 1 { tops[0] } else { own }));
            }
        }
        out
    }

    #[test]
    fn majority_filter_matches_oracle() {
        let mut rng = seed::rng(11, "majority-oracle");
        for i in 0..1000 {
            // few classes and many suppressed cells make ties and holes common
            let k = [2u8, 3, 4, 10][i % 4];
            let p_sup = [0.0, 0.1, 0.3][i % 3];
            let classes: Vec<Option<u8>> = (0..32 * 32)
                .map(|_| if rng.random_bool(p_sup) { None } else { Some(rng.random_range(0..k)) })
                .collect();
            let got = majority_filter_classes(&classes, 32, 32);
            assert_eq!(got, oracle(&classes, 32, 32), "raster {i}");
        }
    }

    fn raster_of(classes: Vec<Option<u8>>, rows: usize, cols: usize) -> ClassRaster {
        let cells = classes
            .into_iter()
            .enumerate()
            .map(|(i, k)| Cell {
                class_id: k,
                confidence: 0.5 + (i % 5) as f64 * 0.1,
                uuid: format!("u{i}"),
                bounds: gt().block_bounds(i / cols, i % cols, 1, 1),
            })
            .collect();
        ClassRaster { rows, cols, cells }
    }

    #[test]
    fn majority_filter_examples() {
        let uniform = raster_of(vec![Some(4); 12], 3, 4);
        assert_eq!(majority_filter(&uniform, 3).unwrap(), uniform);

        let mut cls = vec![Some(2); 9];
        cls[4] = Some(7);
        let out = majority_filter(&raster_of(cls.clone(), 3, 3), 1).unwrap();
        assert_eq!(out.get(1, 1).class_id, Some(2));
        assert_eq!(out.get(1, 1).confidence, raster_of(cls, 3, 3).get(1, 1).confidence);

        // every cell of a 2x2 split sees a 2-2 tie and keeps its class
        let split = raster_of(vec![Some(0), Some(0), Some(1), Some(1)], 2, 2);
        assert_eq!(majority_filter(&split, 1).unwrap(), split);
        // corner cell outvoted by its three in-bounds neighbours
        let corner = raster_of(vec![Some(3), Some(6), Some(6), Some(6)], 2, 2);
        assert_eq!(majority_filter(&corner, 1).unwrap().classes(), vec![Some(6); 4]);

        // a suppressed centre stays suppressed even when surrounded
        let mut cls = vec![Some(1); 9];
        cls[4] = None;
        assert_eq!(majority_filter(&raster_of(cls, 3, 3), 1).unwrap().get(1, 1).class_id, None);

        let empty = ClassRaster {
            rows: 0,
            cols: 0,
            cells: vec![],
        };
        assert!(majority_filter(&empty, 1).is_err());
    }

    proptest! {
        #[test]
        fn majority_filter_stays_in_neighbourhood(classes in prop::collection::vec(prop::option::weighted(0.8, 0u8..4), 1..64), cols in 1usize..9) {
            let rows = classes.len() / cols;
            prop_assume!(rows > 0);
            let classes = &classes[..rows * cols];
            let out = majority_filter_classes(classes, rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    if let Some(k) = out[r * cols + c] {
                        let mut seen = false;
                        for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                            for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                                seen |= classes[rr * cols + cc] == Some(k);
                            }
                        }
                        prop_assert!(seen);
                    } else {
                        prop_assert!(classes[r * cols + c].is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn stitch_places_tiles_row_major() {
        let sc = scene(130, 130);
        let chips = tiles(&sc, 64, &Mask::filled(130, 130, true));
        assert_eq!(chips.len(), 4);
        let preds: Vec<_> = (0..4).map(|k| pred(k as u8, 0.9)).collect();
        let r = stitch(&chips, &preds, &TileGrid::for_scene(&sc, 64)).unwrap();
        assert_eq!((r.rows, r.cols), (2, 2));
        assert_eq!(r.classes(), vec![Some(0), Some(1), Some(2), Some(3)]);
        assert_eq!(r.get(1, 0).uuid, chips[2].uuid);
        assert_eq!(r.get(1, 0).bounds, chips[2].bounds);
    }

    #[test]
    fn discarded_tile_is_suppressed() {
        let sc = scene(130, 130);
        let mut mask = Mask::filled(130, 130, true);
        mask.set(70, 10, false);
        let chips = tiles(&sc, 64, &mask);
        assert_eq!(chips.len(), 3);
        let preds = vec![pred(5, 0.9); 3];
        let grid = TileGrid::for_scene(&sc, 64);
        let r = stitch(&chips, &preds, &grid).unwrap();
        let hole = r.get(1, 0);
        assert_eq!((hole.class_id, hole.confidence, hole.uuid.as_str()), (None, 0.0, ""));
        assert_eq!(hole.bounds, gt().block_bounds(64, 0, 64, 64));
    }

    #[test]
    fn duplicate_cell_names_both_uuids() {
        let sc = scene(128, 64);
        let mut chips = tiles(&sc, 64, &Mask::filled(128, 64, true));
        chips[1].col_off = 0;
        let err = stitch(&chips, &[pred(0, 1.0); 2], &TileGrid::for_scene(&sc, 64)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&chips[0].uuid) && msg.contains(&chips[1].uuid), "{msg}");
    }

    #[test]
    fn stitch_ignores_input_order() {
        let sc = scene(320, 256);
        let chips = tiles(&sc, 32, &Mask::filled(320, 256, true));
        let mut rng = seed::rng(2, "stitch-perm");
        let preds: Vec<_> = (0..chips.len()).map(|_| pred(rng.random_range(0..10), rng.random_range(0.0..1.0))).collect();
        let grid = TileGrid::for_scene(&sc, 32);
        let base = stitch(&chips, &preds, &grid).unwrap();
        for _ in 0..20 {
            let mut order: Vec<usize> = (0..chips.len()).collect();
            order.shuffle(&mut rng);
            let c: Vec<_> = order.iter().map(|&i| chips[i].clone()).collect();
            let p: Vec<_> = order.iter().map(|&i| preds[i]).collect();
            assert_eq!(stitch(&c, &p, &grid).unwrap(), base);
        }
    }

    #[test]
    fn csv_round_trip_and_png() {
        let mut cls: Vec<Option<u8>> = (0..12).map(|i| Some((i % 10) as u8)).collect();
        cls[5] = None;
        let r = raster_of(cls, 3, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_raster_csv(&p, &r).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("row,col,class_id,confidence,uuid,min_lon,min_lat,max_lon,max_lat\n"));
        assert!(text.lines().nth(6).unwrap().starts_with("1,1,-1,"));
        assert_eq!(read_raster_csv(&p).unwrap(), r);

        let img = dir.path().join("r.png");
        write_raster_png(&img, &r, &DEFAULT_PALETTE, 4).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&img).unwrap()));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (16, 12));
        assert_eq!(buf[(4 * 16) + 4], 10, "suppressed cell uses the extra palette entry");
        assert_eq!(buf[0], 0);
    }

    #[test]
    fn csv_rejects_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "row,col,class_id,confidence,uuid,min_lon,min_lat,max_lon,max_lat\n1,1,3,0.9,u,0,0,1,1\n").unwrap();
        assert!(matches!(read_raster_csv(&p), Err(Error::Parse { .. })));
    }
}
