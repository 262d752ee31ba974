//! Non-overlapping tiling of masked scenes into fixed-size chips.

use rand::RngCore;
use uuid::Uuid;

use super::{ClassGrid, Mask, Scene, TileChip};
use crate::seed::{self, StageRng};
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilingOptions {
    pub tile_size: usize,
    /// Minimum share of mask-true pixels a tile needs to be kept. `1.0`
    /// (the default) discards any tile touching an invalid pixel.
    pub min_valid_fraction: f64,
}

impl Default for TilingOptions {
    fn default() -> Self {
        Self {
            tile_size: 64,
            min_valid_fraction: 1.0,
        }
    }
}

/// Source of version-4 UUIDs: seeded (reproducible) or OS entropy.
pub struct UuidGen {
    rng: Option<StageRng>,
}

impl UuidGen {
    pub fn seeded(master: u64) -> Self {
        Self {
            rng: Some(seed::rng(master, "uuid")),
        }
    }

    pub fn random() -> Self {
        Self { rng: None }
    }

    pub fn next_uuid(&mut self) -> String {
        let id = match &mut self.rng {
            Some(rng) => {
                let mut bytes = [0u8; 16];
                rng.fill_bytes(&mut bytes);
                uuid::Builder::from_random_bytes(bytes).into_uuid()
            }
            None => Uuid::new_v4(),
        };
        id.hyphenated().to_string()
    }
}

/// Tile-grid dimensions `(rows, cols)`: only whole tiles count.
pub fn grid_dims(width: usize, height: usize, tile_size: usize) -> (usize, usize) {
    if tile_size == 0 {
        return (0, 0);
    }
    (height / tile_size, width / tile_size)
}

/// Cuts `scene` into non-overlapping `tile_size` tiles anchored at `(0, 0)`.
///
/// Tiles that would cross the scene edge are never produced. A tile is kept
/// when its share of mask-true pixels reaches `min_valid_fraction` (and it
/// has at least one valid pixel). Invalid pixels inside a kept tile are
/// filled with the tile's per-band mean of valid pixels. Output is row-major
/// and UUIDs are drawn in that order.
pub fn tile_scene(
    scene: &Scene,
    mask: &Mask,
    opts: &TilingOptions,
    uuids: &mut UuidGen,
) -> Result<Vec<TileChip>> {
    let size = opts.tile_size;
    if size == 0 {
        return Err(Error::invalid("tile size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&opts.min_valid_fraction) {
        return Err(Error::invalid(format!(
            "min_valid_fraction {} outside [0, 1]",
            opts.min_valid_fraction
        )));
    }
    if mask.width != scene.width || mask.height != scene.height {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match scene {}x{}",
            mask.width, mask.height, scene.width, scene.height
        )));
    }
    let (rows, cols) = grid_dims(scene.width, scene.height, size);
    let area = size * size;
    let needed = ((opts.min_valid_fraction * area as f64).ceil() as usize).max(1);

    let per_row: Vec<Vec<(usize, Vec<f32>)>> = par::map_range(rows, |tr| {
        let mut kept = Vec::new();
        for tc in 0..cols {
            let (r0, c0) = (tr * size, tc * size);
            let valid = (r0..r0 + size)
                .map(|r| (c0..c0 + size).filter(|&c| mask.get(r, c)).count())
                .sum::<usize>();
            if valid >= needed {
                kept.push((tc, cut_chip(scene, mask, r0, c0, size, valid)));
            }
        }
        kept
    });

    let mut out = Vec::new();
    for (tr, row) in per_row.into_iter().enumerate() {
        for (tc, data) in row {
            let (row_off, col_off) = (tr * size, tc * size);
            out.push(TileChip {
                uuid: uuids.next_uuid(),
                scene_id: scene.meta.scene_id.clone(),
                row_off,
                col_off,
                size,
                bands: scene.bands,
                data,
                bounds: scene.geotransform.block_bounds(row_off, col_off, size, size),
                label: None,
            });
        }
    }
    Ok(out)
}

fn cut_chip(scene: &Scene, mask: &Mask, r0: usize, c0: usize, size: usize, valid: usize) -> Vec<f32> {
    let mut data = Vec::with_capacity(scene.bands * size * size);
    for b in 0..scene.bands {
        let plane = scene.plane(b);
        let start = data.len();
        let mut sum = 0.0f64;
        for r in r0..r0 + size {
            let row = &plane[r * scene.width + c0..r * scene.width + c0 + size];
            data.extend_from_slice(row);
            if valid < size * size {
                sum += (c0..c0 + size)
                    .filter(|&c| mask.get(r, c))
                    .map(|c| f64::from(plane[r * scene.width + c]))
                    .sum::<f64>();
            }
        }
        if valid < size * size {
            let fill = (sum / valid as f64) as f32;
            for (i, v) in data[start..].iter_mut().enumerate() {
                let (r, c) = (r0 + i / size, c0 + i % size);
                if !mask.get(r, c) {
                    *v = fill;
                }
            }
        }
    }
    data
}

/// Labels each chip with the majority ground-truth class under it (ties go
/// to the lowest class id).
pub fn label_tiles(chips: &mut [TileChip], truth: &ClassGrid) {
    for chip in chips.iter_mut() {
        let mut counts = [0usize; 256];
        for r in chip.row_off..chip.row_off + chip.size {
            for c in chip.col_off..chip.col_off + chip.size {
                counts[truth.get(r, c) as usize] += 1;
            }
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c as u8);
        chip.label = best;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::synth::{synth_scene, ClassLayout, SynthSpec};
    use std::collections::HashSet;

    fn scene(w: usize, h: usize) -> Scene {
        synth_scene(1, &SynthSpec::new(w.max(64), h.max(64), ClassLayout::Constant { class: 0 }))
            .0
            .cropped(w, h)
    }

    #[test]
    fn border_remainder_is_discarded() {
        let s = scene(130, 130);
        let mask = Mask::filled(130, 130, true);
        let tiles = tile_scene(&s, &mask, &TilingOptions::default(), &mut UuidGen::seeded(0)).unwrap();
        let offs: Vec<_> = tiles.iter().map(|t| (t.row_off, t.col_off)).collect();
        assert_eq!(offs, [(0, 0), (0, 64), (64, 0), (64, 64)]);
        assert!(tiles.iter().all(|t| t.data.len() == 64 * 64 * 3));
    }

    #[test]
    fn single_tile_scene() {
        let s = scene(64, 64);
        let tiles = tile_scene(&s, &Mask::filled(64, 64, true), &TilingOptions::default(), &mut UuidGen::seeded(0))
            .unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].data, s.pixels);
        assert_eq!(tiles[0].bounds, s.geotransform.block_bounds(0, 0, 64, 64));
    }

    #[test]
    fn one_invalid_pixel_kills_its_tile() {
        let s = scene(128, 128);
        let mut mask = Mask::filled(128, 128, true);
        mask.set(10, 10, false);
        let tiles = tile_scene(&s, &mask, &TilingOptions::default(), &mut UuidGen::seeded(0)).unwrap();
        let offs: Vec<_> = tiles.iter().map(|t| (t.row_off, t.col_off)).collect();
        assert_eq!(offs, [(0, 64), (64, 0), (64, 64)]);
    }

    #[test]
    fn relaxed_fraction_fills_invalid_pixels() {
        let s = scene(64, 64);
        let mut mask = Mask::filled(64, 64, true);
        mask.set(0, 0, false);
        let opts = TilingOptions {
            tile_size: 64,
            min_valid_fraction: 0.99,
        };
        let tiles = tile_scene(&s, &mask, &opts, &mut UuidGen::seeded(0)).unwrap();
        assert_eq!(tiles.len(), 1);
        let plane0 = &s.pixels[..64 * 64];
        let mean = plane0[1..].iter().map(|&v| f64::from(v)).sum::<f64>() / 4095.0;
        assert!((f64::from(tiles[0].data[0]) - mean).abs() < 1e-5);

        let empty = Mask::filled(64, 64, false);
        let zero = TilingOptions {
            tile_size: 64,
            min_valid_fraction: 0.0,
        };
        assert!(tile_scene(&s, &empty, &zero, &mut UuidGen::seeded(0)).unwrap().is_empty());
    }

    #[test]
    fn oversized_tiles_give_empty_output() {
        let s = scene(100, 70);
        let opts = TilingOptions {
            tile_size: 128,
            min_valid_fraction: 1.0,
        };
        assert!(tile_scene(&s, &Mask::filled(100, 70, true), &opts, &mut UuidGen::seeded(0))
            .unwrap()
            .is_empty());
        let zero = TilingOptions {
            tile_size: 0,
            min_valid_fraction: 1.0,
        };
        assert!(tile_scene(&s, &Mask::filled(100, 70, true), &zero, &mut UuidGen::seeded(0)).is_err());
    }

    #[test]
    fn uuids_unique_and_seeded() {
        let s = scene(320, 320);
        let mask = Mask::filled(320, 320, true);
        let a = tile_scene(&s, &mask, &TilingOptions::default(), &mut UuidGen::seeded(4)).unwrap();
        let b = tile_scene(&s, &mask, &TilingOptions::default(), &mut UuidGen::seeded(4)).unwrap();
        let ids: HashSet<_> = a.iter().map(|t| t.uuid.clone()).collect();
        assert_eq!(ids.len(), 25);
        assert_eq!(a, b);
        let parsed = Uuid::parse_str(&a[0].uuid).unwrap();
        assert_eq!(parsed.get_version_num(), 4);
        let r = tile_scene(&s, &mask, &TilingOptions::default(), &mut UuidGen::random()).unwrap();
        assert_ne!(r[0].uuid, a[0].uuid);
    }

    #[test]
    fn labels_follow_truth_majority() {
        let (s, truth) = synth_scene(
            2,
            &SynthSpec::new(256, 256, ClassLayout::Checkerboard { cell: 64, num_classes: 10 }),
        );
        let mut tiles = tile_scene(&s, &Mask::filled(256, 256, true), &TilingOptions::default(), &mut UuidGen::seeded(0))
            .unwrap();
        label_tiles(&mut tiles, &truth);
        for t in &tiles {
            let (r, c) = t.grid_cell();
            assert_eq!(t.label, Some(((r + c) % 10) as u8));
        }
    }
}
