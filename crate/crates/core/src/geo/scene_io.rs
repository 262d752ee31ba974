//! Scene container: a `key = value` text sidecar (`.hdr`) plus a raw
//! little-endian float32 band-sequential pixel file (`.f32`).
//!
//! See `docs/formats.md` for the byte layout. An importer for 8-bit PNG plus
//! sidecar is also provided. GeoTIFF would slot in as another importer
//! producing a [`Scene`].

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use super::{ClassGrid, GeoTransform, Scene, SceneMeta};
use crate::{Error, Result};

pub const SCENE_FORMAT: &str = "lulc-scene";
pub const SCENE_VERSION: u32 = 1;

/// Parsed sidecar: ordered key/value pairs.
#[derive(Debug, Clone, Default)]
pub struct Sidecar {
    fields: BTreeMap<String, String>,
    path: String,
}

impl Sidecar {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::parse(format!("{path}:{}", i + 1), "expected `key = value`")
            })?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self {
            fields,
            path: path.to_string(),
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse(&self.path, format!("missing field `{key}`")))
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.require(key)?
            .parse()
            .map_err(|e| Error::parse(&self.path, format!("field `{key}`: {e}")))
    }

    fn geotransform(&self) -> Result<GeoTransform> {
        Ok(GeoTransform {
            origin_lon: self.number("origin_lon")?,
            origin_lat: self.number("origin_lat")?,
            pixel_width: self.number("pixel_w")?,
            pixel_height: self.number("pixel_h")?,
        })
    }

    fn nodata(&self) -> Result<f32> {
        match self.get("nodata") {
            None => Ok(f32::NAN),
            Some(v) if v.eq_ignore_ascii_case("nan") => Ok(f32::NAN),
            Some(_) => self.number("nodata"),
        }
    }

    fn meta(&self, hdr: &Path) -> Result<SceneMeta> {
        let scene_id = match self.get("scene_id") {
            Some(id) => id.to_string(),
            None => hdr
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let acquisition_date = match self.get("date") {
            Some(d) => d
                .parse::<NaiveDate>()
                .map_err(|e| Error::parse(&self.path, format!("field `date`: {e}")))?,
            None => NaiveDate::default(),
        };
        let cloud_cover_pct = match self.get("cloud_pct") {
            Some(_) => self.number("cloud_pct")?,
            None => 0.0,
        };
        Ok(SceneMeta {
            scene_id,
            acquisition_date,
            cloud_cover_pct,
            path: hdr.to_path_buf(),
        })
    }
}

fn is_nodata(v: f32, nodata: f32) -> bool {
    !v.is_finite() || v == nodata || (nodata.is_nan() && v.is_nan())
}

/// Derives the validity mask: a pixel is valid when every band holds a finite
/// value different from `nodata`.
pub fn validity_from_nodata(pixels: &[f32], width: usize, height: usize, bands: usize, nodata: f32) -> Vec<bool> {
    let n = width * height;
    (0..n)
        .map(|i| (0..bands).all(|b| !is_nodata(pixels[b * n + i], nodata)))
        .collect()
}

fn data_path(hdr: &Path, sc: &Sidecar) -> PathBuf {
    let dir = hdr.parent().unwrap_or_else(|| Path::new("."));
    match sc.get("data") {
        Some(name) => dir.join(name),
        None => hdr.with_extension("f32"),
    }
}

/// Writes `<base>.hdr` and `<base>.f32`. Invalid pixels are written as NaN.
pub fn write_scene(scene: &Scene, hdr_path: &Path) -> Result<()> {
    let data_file = hdr_path.with_extension("f32");
    let data_name = data_file
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let gt = scene.geotransform;
    let header = format!(
        "# lulc scene container\n\
         format = {SCENE_FORMAT}\n\
         version = {SCENE_VERSION}\n\
         scene_id = {}\n\
         date = {}\n\
         cloud_pct = {}\n\
         width = {}\n\
         height = {}\n\
         bands = {}\n\
         origin_lon = {}\n\
         origin_lat = {}\n\
         pixel_w = {}\n\
         pixel_h = {}\n\
         nodata = nan\n\
         data = {data_name}\n",
        scene.meta.scene_id,
        scene.meta.acquisition_date,
        scene.meta.cloud_cover_pct,
        scene.width,
        scene.height,
        scene.bands,
        gt.origin_lon,
        gt.origin_lat,
        gt.pixel_width,
        gt.pixel_height,
    );
    fs::write(hdr_path, header).map_err(|e| Error::io(hdr_path, e))?;

    let n = scene.width * scene.height;
    let mut bytes = Vec::with_capacity(scene.pixels.len() * 4);
    for (i, &v) in scene.pixels.iter().enumerate() {
        let v = if scene.nodata_mask[i % n] { v } else { f32::NAN };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data_file, bytes).map_err(|e| Error::io(&data_file, e))
}

/// Reads a scene container from its `.hdr` sidecar.
pub fn read_scene(hdr_path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(hdr_path).map_err(|e| Error::io(hdr_path, e))?;
    let sc = Sidecar::parse(&text, &hdr_path.display().to_string())?;
    if let Some(f) = sc.get("format") {
        if f != SCENE_FORMAT {
            return Err(Error::parse(hdr_path.display(), format!("unknown format `{f}`")));
        }
    }
    if sc.get("version").is_some() {
        let v: u32 = sc.number("version")?;
        if v != SCENE_VERSION {
            return Err(Error::parse(hdr_path.display(), format!("unsupported version {v}")));
        }
    }
    let width: usize = sc.number("width")?;
    let height: usize = sc.number("height")?;
    let bands: usize = sc.number("bands")?;
    let gt = sc.geotransform()?;
    let nodata = sc.nodata()?;

    let dp = data_path(hdr_path, &sc);
    let raw = fs::read(&dp).map_err(|e| Error::io(&dp, e))?;
    let expected = width * height * bands * 4;
    if raw.len() != expected {
        return Err(Error::parse(
            dp.display(),
            format!("{} bytes, expected {expected}", raw.len()),
        ));
    }
    let pixels: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask = validity_from_nodata(&pixels, width, height, bands, nodata);
    Scene::new(sc.meta(hdr_path)?, width, height, bands, pixels, mask, gt)
}

/// Imports an 8-bit RGB(A) PNG with a sidecar carrying the geotransform
/// fields. Samples are scaled to `[0, 1]`; alpha 0 marks nodata.
pub fn import_png(png_path: &Path, sidecar_path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let sc = Sidecar::parse(&text, &sidecar_path.display().to_string())?;
    let file = fs::File::open(png_path).map_err(|e| Error::io(png_path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::parse(png_path.display(), e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(png_path.display(), "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(png_path.display(), e))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::parse(
                png_path.display(),
                format!("expected RGB or RGBA, found {other:?}"),
            ))
        }
    };
    for (key, actual) in [("width", width), ("height", height)] {
        if sc.get(key).is_some() && sc.number::<usize>(key)? != actual {
            return Err(Error::parse(
                sidecar_path.display(),
                format!("`{key}` disagrees with the PNG ({actual})"),
            ));
        }
    }
    let n = width * height;
    let mut pixels = vec![0.0f32; n * 3];
    let mut mask = vec![true; n];
    for i in 0..n {
        let px = &buf[i * channels..(i + 1) * channels];
        for b in 0..3 {
            pixels[b * n + i] = f32::from(px[b]) / 255.0;
        }
        if channels == 4 && px[3] == 0 {
            mask[i] = false;
        }
    }
    let mut meta = sc.meta(sidecar_path)?;
    meta.path = png_path.to_path_buf();
    Scene::new(meta, width, height, 3, pixels, mask, sc.geotransform()?)
}

/// Writes a ground-truth class grid as raw bytes (one class id per pixel).
pub fn write_truth(grid: &ClassGrid, path: &Path) -> Result<()> {
    fs::write(path, &grid.classes).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path, width: usize, height: usize) -> Result<ClassGrid> {
    let classes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if classes.len() != width * height {
        return Err(Error::parse(
            path.display(),
            format!("{} cells, expected {}", classes.len(), width * height),
        ));
    }
    Ok(ClassGrid {
        width,
        height,
        classes,
    })
}
