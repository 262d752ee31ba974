//! Chip archive: `index.csv` + `archive.json` + one `.f32` blob per scene.
//! Byte layout in `docs/formats.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geo::{GeoTransform, TileChip};
use crate::{Error, Result};

pub const INDEX_FILE: &str = "index.csv";
pub const META_FILE: &str = "archive.json";
const FORMAT: &str = "lulc-chips";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveMeta {
    format: String,
    version: u32,
    tile_size: usize,
    bands: usize,
    scenes: Vec<SceneEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneEntry {
    scene_id: String,
    blob: String,
    chips: usize,
    geotransform: GeoTransform,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    uuid: String,
    scene_id: String,
    row_off: usize,
    col_off: usize,
    label: Option<u8>,
}

fn blob_name(scene_id: &str) -> String {
    let safe: String = scene_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.f32")
}

/// Writes `chips` (any mix of scenes, order preserved) into `dir`.
/// `transforms` must hold the geotransform of every scene referenced.
pub fn write_archive(dir: &Path, chips: &[TileChip], transforms: &BTreeMap<String, GeoTransform>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (size, bands) = chips.first().map_or((0, 0), |c| (c.size, c.bands));
    let mut scenes: Vec<SceneEntry> = Vec::new();
    let mut blobs: BTreeMap<String, BufWriter<fs::File>> = BTreeMap::new();

    let index_path = dir.join(INDEX_FILE);
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| Error::parse(index_path.display(), e))?;
    for chip in chips {
        if chip.size != size || chip.bands != bands || chip.data.len() != bands * size * size {
            return Err(Error::Shape(format!("chip {} does not match the archive chip shape", chip.uuid)));
        }
        if !blobs.contains_key(&chip.scene_id) {
            let gt = transforms
                .get(&chip.scene_id)
                .ok_or_else(|| Error::invalid(format!("no geotransform for scene {}", chip.scene_id)))?;
            let blob = blob_name(&chip.scene_id);
            if scenes.iter().any(|s| s.blob == blob) {
                return Err(Error::invalid(format!("scene ids collide on blob name {blob}")));
            }
            let path = dir.join(&blob);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            blobs.insert(chip.scene_id.clone(), BufWriter::new(f));
            scenes.push(SceneEntry {
                scene_id: chip.scene_id.clone(),
                blob,
                chips: 0,
                geotransform: *gt,
            });
        }
        let w = blobs.get_mut(&chip.scene_id).expect("inserted above");
        let bytes: Vec<u8> = chip.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(|e| Error::io(dir, e))?;
        scenes
            .iter_mut()
            .find(|s| s.scene_id == chip.scene_id)
            .expect("inserted above")
            .chips += 1;
        index
            .serialize(IndexRow {
                uuid: chip.uuid.clone(),
                scene_id: chip.scene_id.clone(),
                row_off: chip.row_off,
                col_off: chip.col_off,
                label: chip.label,
            })
            .map_err(|e| Error::parse(index_path.display(), e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    for (_, mut w) in blobs {
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    let meta = ArchiveMeta {
        format: FORMAT.into(),
        version: VERSION,
        tile_size: size,
        bands,
        scenes,
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("plain data serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
}

/// Reads an archive back; chip order and payloads are reproduced exactly
/// and bounds are recomputed from the scene geotransforms.
pub fn read_archive(dir: &Path) -> Result<Vec<TileChip>> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ArchiveMeta = serde_json::from_str(&text).map_err(|e| Error::parse(meta_path.display(), e))?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(Error::parse(
            meta_path.display(),
            format!("unsupported archive {} v{}", meta.format, meta.version),
        ));
    }
    let chip_len = meta.bands * meta.tile_size * meta.tile_size;
    let mut blobs = BTreeMap::new();
    for s in &meta.scenes {
        let path = dir.join(&s.blob);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != s.chips * chip_len * 4 {
            return Err(Error::parse(
                path.display(),
                format!("expected {} bytes for {} chips, found {}", s.chips * chip_len * 4, s.chips, bytes.len()),
            ));
        }
        blobs.insert(s.scene_id.clone(), (s, bytes, 0usize));
    }

    let index_path = dir.join(INDEX_FILE);
    let mut rdr = csv::Reader::from_path(&index_path).map_err(|e| Error::parse(index_path.display(), e))?;
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<IndexRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(index_path.display(), e))?;
        let (scene, bytes, next) = blobs.get_mut(&row.scene_id).ok_or_else(|| {
            Error::parse(index_path.display(), format!("line {}: unknown scene {}", line + 2, row.scene_id))
        })?;
        let start = *next * chip_len * 4;
        let slice = bytes.get(start..start + chip_len * 4).ok_or_else(|| {
            Error::parse(index_path.display(), format!("more index rows than chips for scene {}", row.scene_id))
        })?;
        *next += 1;
        out.push(TileChip {
            uuid: row.uuid,
            bounds: scene
                .geotransform
                .block_bounds(row.row_off, row.col_off, meta.tile_size, meta.tile_size),
            scene_id: row.scene_id,
            row_off: row.row_off,
            col_off: row.col_off,
            size: meta.tile_size,
            bands: meta.bands,
            data: slice.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
            label: row.label,
        });
    }
    if let Some((id, _)) = blobs.iter().find(|(_, (s, _, n))| *n != s.chips) {
        return Err(Error::parse(index_path.display(), format!("index does not cover every chip of scene {id}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{synth_scene, tile_scene, ClassLayout, Mask, SynthSpec, TilingOptions, UuidGen};

    #[test]
    fn round_trip() {
        let spec = SynthSpec::new(
            130,
            200,
            ClassLayout::Checkerboard {
                cell: 64,
                num_classes: 10,
            },
        );
        let mut chips = Vec::new();
        let mut transforms = BTreeMap::new();
        let mut uuids = UuidGen::seeded(1);
        for seed in [3, 4] {
            let (scene, truth) = synth_scene(seed, &spec);
            let mask = Mask::filled(scene.width, scene.height, true);
            let mut tiles = tile_scene(&scene, &mask, &TilingOptions::default(), &mut uuids).unwrap();
            crate::geo::tiling::label_tiles(&mut tiles, &truth);
            tiles[0].label = None;
            transforms.insert(scene.meta.scene_id.clone(), scene.geotransform);
            chips.extend(tiles);
        }
        chips.swap(0, 7);
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), &chips, &transforms).unwrap();
        let back = read_archive(dir.path()).unwrap();
        assert_eq!(back, chips);
        let header = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert!(header.starts_with("uuid,scene_id,row_off,col_off,label\n"));
    }

    #[test]
    fn short_blob_is_rejected() {
        let spec = SynthSpec::new(64, 64, ClassLayout::Constant { class: 2 });
        let (scene, _) = synth_scene(1, &spec);
        let mask = Mask::filled(64, 64, true);
        let chips = tile_scene(&scene, &mask, &TilingOptions::default(), &mut UuidGen::seeded(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let transforms = BTreeMap::from([(scene.meta.scene_id.clone(), scene.geotransform)]);
        write_archive(dir.path(), &chips, &transforms).unwrap();
        let blob = dir.path().join(blob_name(&scene.meta.scene_id));
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_archive(dir.path()), Err(Error::Parse { .. })));
    }
}
