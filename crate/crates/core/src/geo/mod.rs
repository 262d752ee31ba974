//! Scene ingest: catalogs, ROI masks, tiling and channel standardization.

pub mod catalog;
pub mod polygon;
pub mod scene_io;
pub mod stats;
pub mod synth;
pub mod tiling;

use std::path::PathBuf;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use catalog::filter_catalog;
pub use polygon::{point_in_polygon, rasterize_mask, Region, Roi, RoiPolygon};
pub use stats::{compute_channel_stats, standardize, unstandardize, ChannelStats};
pub use synth::{synth_scene, ClassGrid, ClassLayout, SynthSpec};
pub use tiling::{label_tiles, tile_scene, TilingOptions, UuidGen};

/// Catalog entry describing one acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub acquisition_date: NaiveDate,
    /// Percentage in `[0, 100]`.
    pub cloud_cover_pct: f64,
    pub path: PathBuf,
}

/// Affine pixel-to-geographic mapping for a north-up raster.
///
/// Pixel `(row, col)` has its top-left corner at
/// `(origin_lon + col * pixel_width, origin_lat + row * pixel_height)`;
/// `pixel_height` is negative for north-up rasters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
}

impl GeoTransform {
    /// Geographic coordinate of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_lon + (col as f64 + 0.5) * self.pixel_width,
            self.origin_lat + (row as f64 + 0.5) * self.pixel_height,
        )
    }

    /// Bounds of the pixel block starting at `(row, col)`.
    pub fn block_bounds(&self, row: usize, col: usize, height: usize, width: usize) -> Bounds {
        let lon0 = self.origin_lon + col as f64 * self.pixel_width;
        let lon1 = self.origin_lon + (col + width) as f64 * self.pixel_width;
        let lat0 = self.origin_lat + row as f64 * self.pixel_height;
        let lat1 = self.origin_lat + (row + height) as f64 * self.pixel_height;
        Bounds {
            min_lon: lon0.min(lon1),
            min_lat: lat0.min(lat1),
            max_lon: lon0.max(lon1),
            max_lat: lat0.max(lat1),
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.origin_lon, self.origin_lat, self.pixel_width, self.pixel_height]
            .iter()
            .all(|v| v.is_finite())
            && self.pixel_width != 0.0
            && self.pixel_height != 0.0
    }
}

/// Geographic bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

/// A georeferenced multi-band raster.
///
/// `pixels` is band-sequential: plane `b` occupies
/// `pixels[b * width * height .. (b + 1) * width * height]`, each plane
/// row-major. `nodata_mask` is `true` where the pixel holds valid data.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub meta: SceneMeta,
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub pixels: Vec<f32>,
    pub nodata_mask: Vec<bool>,
    pub geotransform: GeoTransform,
}

impl Scene {
    pub fn new(
        meta: SceneMeta,
        width: usize,
        height: usize,
        bands: usize,
        pixels: Vec<f32>,
        nodata_mask: Vec<bool>,
        geotransform: GeoTransform,
    ) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "scene {} has empty dimensions {width}x{height}x{bands}",
                meta.scene_id
            )));
        }
        if pixels.len() != width * height * bands {
            return Err(Error::Shape(format!(
                "scene {}: {} samples for {width}x{height}x{bands}",
                meta.scene_id,
                pixels.len()
            )));
        }
        if nodata_mask.len() != width * height {
            return Err(Error::Shape(format!(
                "scene {}: nodata mask has {} cells for {width}x{height}",
                meta.scene_id,
                nodata_mask.len()
            )));
        }
        if !geotransform.is_valid() {
            return Err(Error::invalid(format!(
                "scene {}: invalid geotransform {geotransform:?}",
                meta.scene_id
            )));
        }
        Ok(Self {
            meta,
            width,
            height,
            bands,
            pixels,
            nodata_mask,
            geotransform,
        })
    }

    pub fn plane(&self, band: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.pixels[band * n..(band + 1) * n]
    }

    /// The top-left `width x height` window of this scene, same origin.
    pub fn cropped(&self, width: usize, height: usize) -> Scene {
        let (width, height) = (width.min(self.width), height.min(self.height));
        let mut pixels = Vec::with_capacity(width * height * self.bands);
        for b in 0..self.bands {
            let plane = self.plane(b);
            for r in 0..height {
                pixels.extend_from_slice(&plane[r * self.width..r * self.width + width]);
            }
        }
        let nodata_mask = (0..height)
            .flat_map(|r| self.nodata_mask[r * self.width..r * self.width + width].iter().copied())
            .collect();
        Scene {
            meta: self.meta.clone(),
            width,
            height,
            bands: self.bands,
            pixels,
            nodata_mask,
            geotransform: self.geotransform,
        }
    }
}

/// Per-pixel boolean grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            cells: vec![value; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.width + col] = value;
    }

    pub fn count_true(&self) -> usize {
        self.cells.iter().filter(|&&v| v).count()
    }
}

/// One square tile cut from a scene.
///
/// `data` is channel-major (`bands x size x size`).
#[derive(Debug, Clone, PartialEq)]
pub struct TileChip {
    pub uuid: String,
    pub scene_id: String,
    pub row_off: usize,
    pub col_off: usize,
    pub size: usize,
    pub bands: usize,
    pub data: Vec<f32>,
    pub bounds: Bounds,
    pub label: Option<u8>,
}

impl TileChip {
    pub fn grid_cell(&self) -> (usize, usize) {
        (self.row_off / self.size, self.col_off / self.size)
    }
}
