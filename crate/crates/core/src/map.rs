//! GeoJSON and self-contained HTML output for stitched class rasters.
//!
//! The HTML page carries its own small SVG renderer (pan, zoom, per-class
//! toggles, hover tooltips), so it opens offline with no external assets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::infer::{ClassRaster, DEFAULT_PALETTE};
use crate::{Error, Result, CLASS_NAMES, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapStyle {
    /// `#rrggbb` colour per class id.
    pub class_palette: Vec<String>,
    pub legend_labels: Vec<String>,
    /// Fill opacity in `(0, 1]`.
    pub opacity: f64,
}

impl Default for MapStyle {
    fn default() -> Self {
        Self {
            class_palette: DEFAULT_PALETTE.iter().map(|c| to_hex(*c)).collect(),
            legend_labels: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            opacity: 0.7,
        }
    }
}

fn to_hex([r, g, b]: [u8; 3]) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn parse_hex(s: &str) -> Option<[u8; 3]> {
    let h = s.strip_prefix('#')?;
    if h.len() != 6 || !h.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let v = u32::from_str_radix(h, 16).ok()?;
    Some([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

impl MapStyle {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.class_palette.len() != NUM_CLASSES {
            out.push(format!("style.class_palette needs {NUM_CLASSES} colours, got {}", self.class_palette.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.class_palette {
            match parse_hex(c) {
                None => out.push(format!("style.class_palette entry `{c}` is not a #rrggbb colour")),
                Some(rgb) if !seen.insert(rgb) => out.push(format!("style.class_palette colour `{c}` is repeated")),
                Some(_) => {}
            }
        }
        if self.legend_labels.len() != NUM_CLASSES {
            out.push(format!("style.legend_labels needs {NUM_CLASSES} labels, got {}", self.legend_labels.len()));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            out.push(format!("style.opacity must be in (0, 1], got {}", self.opacity));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Palette as RGB triples (for raster images).
    pub fn palette_rgb(&self) -> Result<[[u8; 3]; NUM_CLASSES]> {
        self.validate()?;
        Ok(std::array::from_fn(|k| parse_hex(&self.class_palette[k]).expect("validated")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCollection {
    #[serde(rename = "type")]
    pub kind: String,
    pub features: Vec<Feature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    #[serde(rename = "type")]
    pub kind: String,
    pub geometry: Polygon,
    pub properties: CellProperties,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    #[serde(rename = "type")]
    pub kind: String,
    /// Linear rings of `[lon, lat]`; the single exterior ring is closed and
    /// counter-clockwise.
    pub coordinates: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProperties {
    pub class: u8,
    pub class_name: String,
    pub confidence: f64,
    pub uuid: String,
}

/// One polygon per non-suppressed cell, row-major. Class names come from
/// the style's legend labels.
pub fn raster_to_geojson(raster: &ClassRaster, style: &MapStyle) -> Result<FeatureCollection> {
    style.validate()?;
    let features = raster
        .cells
        .iter()
        .filter_map(|cell| {
            let k = cell.class_id?;
            let b = cell.bounds;
            let ring = vec![
                [b.min_lon, b.min_lat],
                [b.max_lon, b.min_lat],
                [b.max_lon, b.max_lat],
                [b.min_lon, b.max_lat],
                [b.min_lon, b.min_lat],
            ];
            Some(Feature {
                kind: "Feature".into(),
                geometry: Polygon {
                    kind: "Polygon".into(),
                    coordinates: vec![ring],
                },
                properties: CellProperties {
                    class: k,
                    class_name: style.legend_labels.get(k as usize).cloned().unwrap_or_default(),
                    confidence: cell.confidence,
                    uuid: cell.uuid.clone(),
                },
            })
        })
        .collect();
    Ok(FeatureCollection {
        kind: "FeatureCollection".into(),
        features,
    })
}

pub fn geojson_string(fc: &FeatureCollection) -> String {
    let mut s = serde_json::to_string_pretty(fc).expect("GeoJSON serializes");
    s.push('\n');
    s
}

pub fn write_geojson(path: &Path, fc: &FeatureCollection) -> Result<()> {
    fs::write(path, geojson_string(fc)).map_err(|e| Error::io(path, e))
}

pub fn read_geojson(path: &Path) -> Result<FeatureCollection> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display(), e.to_string()))
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// JSON that is safe inside a `<script>` element: `<`, `>` and `&` only
/// occur in JSON strings, where `\u` escapes are equivalent.
fn script_safe_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v)
        .expect("serializes")
        .replace('<', "\\u003c")
        .replace('>', "\\u003e")
        .replace('&', "\\u0026")
}

const DATA_OPEN: &str = "<script type=\"application/geo+json\" id=\"lulc-data\">";
const STYLE_OPEN: &str = "<script type=\"application/json\" id=\"lulc-style\">";

const PAGE_CSS: &str = r#"
html, body { margin: 0; height: 100%; font-family: sans-serif; }
#map { position: absolute; inset: 0 260px 0 0; background: #f4f4f0; }
#map svg { width: 100%; height: 100%; cursor: grab; }
#side { position: absolute; top: 0; right: 0; width: 244px; padding: 8px; }
#side h1 { font-size: 15px; margin: 4px 0 8px; }
.legend { list-style: none; padding: 0; margin: 0; font-size: 13px; }
.legend-entry { display: flex; align-items: center; gap: 6px; margin: 3px 0; }
.swatch { display: inline-block; width: 14px; height: 14px; border: 1px solid #555; }
#tip { position: absolute; display: none; pointer-events: none; background: #fff; border: 1px solid #888; padding: 4px 6px; font-size: 12px; }
"#;

const PAGE_JS: &str = r#"
(function () {
  var fc = JSON.parse(document.getElementById('lulc-data').textContent);
  var style = JSON.parse(document.getElementById('lulc-style').textContent);
  var ns = 'http://www.w3.org/2000/svg';
  var svg = document.createElementNS(ns, 'svg');
  document.getElementById('map').appendChild(svg);
  var tip = document.getElementById('tip');
  var hidden = {};
  var minX = Infinity, minY = Infinity, maxX = -Infinity, maxY = -Infinity;
  fc.features.forEach(function (f) {
    f.geometry.coordinates[0].forEach(function (p) {
      minX = Math.min(minX, p[0]); maxX = Math.max(maxX, p[0]);
      minY = Math.min(minY, p[1]); maxY = Math.max(maxY, p[1]);
    });
  });
  if (!isFinite(minX)) { minX = 0; minY = 0; maxX = 1; maxY = 1; }
  var view = { x: minX, y: -maxY, w: Math.max(maxX - minX, 1e-9), h: Math.max(maxY - minY, 1e-9) };
  function apply() { svg.setAttribute('viewBox', [view.x, view.y, view.w, view.h].join(' ')); }
  fc.features.forEach(function (f) {
    var poly = document.createElementNS(ns, 'polygon');
    poly.setAttribute('points', f.geometry.coordinates[0].map(function (p) { return p[0] + ',' + (-p[1]); }).join(' '));
    poly.setAttribute('fill', style.class_palette[f.properties.class]);
    poly.setAttribute('fill-opacity', style.opacity);
    poly.setAttribute('data-class', f.properties.class);
    poly.addEventListener('mousemove', function (e) {
      tip.style.display = 'block';
      tip.style.left = (e.clientX + 12) + 'px';
      tip.style.top = (e.clientY + 12) + 'px';
      tip.textContent = f.properties.class_name + ' (' + (100 * f.properties.confidence).toFixed(1) + '%) ' + f.properties.uuid;
    });
    poly.addEventListener('mouseleave', function () { tip.style.display = 'none'; });
    svg.appendChild(poly);
  });
  document.querySelectorAll('.legend-entry input').forEach(function (box) {
    box.addEventListener('change', function () {
      var k = box.getAttribute('data-class');
      svg.querySelectorAll('polygon[data-class="' + k + '"]').forEach(function (p) {
        p.style.display = box.checked ? '' : 'none';
      });
    });
  });
  svg.addEventListener('wheel', function (e) {
    e.preventDefault();
    var r = svg.getBoundingClientRect();
    var fx = (e.clientX - r.left) / r.width, fy = (e.clientY - r.top) / r.height;
    var s = e.deltaY > 0 ? 1.2 : 1 / 1.2;
    view.x += fx * view.w * (1 - s); view.y += fy * view.h * (1 - s);
    view.w *= s; view.h *= s; apply();
  }, { passive: false });
  var drag = null;
  svg.addEventListener('mousedown', function (e) { drag = { x: e.clientX, y: e.clientY }; });
  window.addEventListener('mouseup', function () { drag = null; });
  window.addEventListener('mousemove', function (e) {
    if (!drag) return;
    var r = svg.getBoundingClientRect();
    view.x -= (e.clientX - drag.x) * view.w / r.width;
    view.y -= (e.clientY - drag.y) * view.h / r.height;
    drag = { x: e.clientX, y: e.clientY }; apply();
  });
  apply();
})();
"#;

/// A standalone HTML page showing `fc` with a 10-entry legend.
pub fn html_string(fc: &FeatureCollection, style: &MapStyle, title: &str) -> Result<String> {
    style.validate()?;
    let mut legend = String::new();
    for (k, (label, colour)) in style.legend_labels.iter().zip(&style.class_palette).enumerate() {
        legend.push_str(&format!(
            "<li class=\"legend-entry\"><input type=\"checkbox\" checked data-class=\"{k}\"><span class=\"swatch\" style=\"background:{}\"></span>{}</li>\n",
            escape_html(colour),
            escape_html(label)
        ));
    }
    let title = escape_html(title);
    Ok(format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n<style>{PAGE_CSS}</style>\n</head>\n<body>\n<div id=\"map\"></div>\n<div id=\"side\">\n<h1>{title}</h1>\n<ul class=\"legend\">\n{legend}</ul>\n</div>\n<div id=\"tip\"></div>\n{DATA_OPEN}{}</script>\n{STYLE_OPEN}{}</script>\n<script>{PAGE_JS}</script>\n</body>\n</html>\n",
        script_safe_json(fc),
        script_safe_json(style),
    ))
}

pub fn render_html(fc: &FeatureCollection, style: &MapStyle, title: &str, out: &Path) -> Result<()> {
    let html = html_string(fc, style, title)?;
    fs::write(out, html).map_err(|e| Error::io(out, e))
}

/// Parses the GeoJSON embedded by [`html_string`] back out of a page.
pub fn extract_geojson(html: &str) -> Result<FeatureCollection> {
    let start = html
        .find(DATA_OPEN)
        .ok_or_else(|| Error::parse("map HTML", "no embedded GeoJSON"))?
        + DATA_OPEN.len();
    let len = html[start..]
        .find("</script>")
        .ok_or_else(|| Error::parse("map HTML", "unterminated GeoJSON script"))?;
    serde_json::from_str(&html[start..start + len]).map_err(|e| Error::parse("map HTML", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoTransform;
    use crate::infer::Cell;
    use crate::seed;
    use rand::Rng;

    fn raster(classes: &[Option<u8>], rows: usize, cols: usize) -> ClassRaster {
        let gt = GeoTransform {
            origin_lon: 10.0,
            origin_lat: 50.0,
            pixel_width: 0.01,
            pixel_height: -0.01,
        };
        ClassRaster {
            rows,
            cols,
            cells: classes
                .iter()
                .enumerate()
                .map(|(i, &k)| Cell {
                    class_id: k,
                    confidence: 0.61 + (i % 7) as f64 * 0.05,
                    uuid: format!("00000000-0000-4000-8000-{i:012}"),
                    bounds: gt.block_bounds((i / cols) * 64, (i % cols) * 64, 64, 64),
                })
                .collect(),
        }
    }

    /// Shoelace area; positive means counter-clockwise.
    fn signed_area(ring: &[[f64; 2]]) -> f64 {
        ring.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum::<f64>() / 2.0
    }

    #[test]
    fn small_and_empty_rasters() {
        let fc = raster_to_geojson(&raster(&[Some(1), None, Some(3), Some(9)], 2, 2), &MapStyle::default()).unwrap();
        assert_eq!(fc.features.len(), 3);
        assert_eq!(fc.features[2].properties.class_name, "SeaLake");
        let empty = ClassRaster {
            rows: 0,
            cols: 0,
            cells: vec![],
        };
        let fc = raster_to_geojson(&empty, &MapStyle::default()).unwrap();
        assert!(fc.features.is_empty());
        let v: serde_json::Value = serde_json::from_str(&geojson_string(&fc)).unwrap();
        assert_eq!(v, serde_json::json!({"type": "FeatureCollection", "features": []}));
    }

    #[test]
    fn random_rasters_are_valid_geojson() {
        let mut rng = seed::rng(5, "geojson");
        for _ in 0..50 {
            let (rows, cols) = (rng.random_range(1..12), rng.random_range(1..12));
            let classes: Vec<Option<u8>> = (0..rows * cols)
                .map(|_| if rng.random_bool(0.2) { None } else { Some(rng.random_range(0..10)) })
                .collect();
            let r = raster(&classes, rows, cols);
            let fc = raster_to_geojson(&r, &MapStyle::default()).unwrap();
            assert_eq!(fc.features.len(), classes.iter().flatten().count());
            let v: serde_json::Value = serde_json::from_str(&geojson_string(&fc)).unwrap();
            assert_eq!(v["type"], "FeatureCollection");
            let mut uuids = std::collections::HashSet::new();
            for f in v["features"].as_array().unwrap() {
                assert_eq!(f["type"], "Feature");
                assert_eq!(f["geometry"]["type"], "Polygon");
                let ring: Vec<[f64; 2]> = serde_json::from_value(f["geometry"]["coordinates"][0].clone()).unwrap();
                assert!(ring.len() >= 4);
                assert_eq!(ring.first(), ring.last());
                assert!(signed_area(&ring) > 0.0);
                for p in &ring {
                    assert!((-180.0..=180.0).contains(&p[0]) && (-90.0..=90.0).contains(&p[1]));
                }
                assert!(uuids.insert(f["properties"]["uuid"].as_str().unwrap().to_string()));
            }
        }
    }

    #[test]
    fn html_legend_and_round_trip() {
        let mut style = MapStyle::default();
        style.legend_labels[3] = "Road </script> & <b>".into();
        let mut r = raster(&[Some(3), Some(0), None, Some(2)], 2, 2);
        r.cells[0].uuid = "</script><script>alert(1)</script>".into();
        let fc = raster_to_geojson(&r, &style).unwrap();
        let html = html_string(&fc, &style, "Map").unwrap();
        assert_eq!(html.matches("class=\"legend-entry\"").count(), 10);
        for label in &style.legend_labels {
            assert!(html.contains(&escape_html(label)));
        }
        assert_eq!(html.matches("</script>").count(), 3);
        assert_eq!(extract_geojson(&html).unwrap(), fc);
        assert_eq!(html_string(&fc, &style, "Map").unwrap(), html);
        // offline: the only URL is the SVG namespace
        assert!(!html.contains("https://") && !html.contains(" src="));
        assert_eq!(html.matches("http://").count(), 1);
    }

    #[test]
    fn style_validation() {
        assert!(MapStyle::default().problems().is_empty());
        let mut s = MapStyle::default();
        s.class_palette[1] = s.class_palette[0].clone();
        s.class_palette[2] = "red".into();
        s.opacity = 0.0;
        s.legend_labels.pop();
        assert_eq!(s.problems().len(), 4);
        assert_eq!(MapStyle::default().palette_rgb().unwrap(), DEFAULT_PALETTE);
    }

    #[test]
    fn files_round_trip() {
        let fc = raster_to_geojson(&raster(&[Some(1), Some(2)], 1, 2), &MapStyle::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.geojson");
        write_geojson(&p, &fc).unwrap();
        assert_eq!(read_geojson(&p).unwrap(), fc);
        let bad = dir.path().join("missing").join("map.html");
        assert!(matches!(render_html(&fc, &MapStyle::default(), "m", &bad), Err(Error::Io { .. })));
    }
}
