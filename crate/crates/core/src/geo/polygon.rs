//! Region-of-interest polygons, GeoJSON parsing and mask rasterization.

use serde_json::Value;

use super::{Mask, Scene};
use crate::{par, Error, Result};

/// A polygon in lon/lat (EPSG:4326). `rings[0]` is the exterior, the rest are
/// holes. Every ring is closed (first point equals last) and has at least
/// four points.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPolygon {
    rings: Vec<Vec<(f64, f64)>>,
}

impl RoiPolygon {
    pub fn new(rings: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        if rings.is_empty() {
            return Err(Error::invalid("polygon has no rings"));
        }
        for (i, ring) in rings.iter().enumerate() {
            if ring.len() < 4 {
                return Err(Error::invalid(format!(
                    "ring {i} has {} points, need at least 4",
                    ring.len()
                )));
            }
            if ring.first() != ring.last() {
                return Err(Error::invalid(format!("ring {i} is not closed")));
            }
            for &(lon, lat) in ring {
                if !lon.is_finite() || !lat.is_finite() {
                    return Err(Error::invalid(format!("ring {i} has a non-finite coordinate")));
                }
                if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
                    return Err(Error::invalid(format!(
                        "ring {i} coordinate ({lon}, {lat}) outside EPSG:4326 range"
                    )));
                }
            }
        }
        Ok(Self { rings })
    }

    /// Axis-aligned rectangle, counter-clockwise.
    pub fn rectangle(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self> {
        Self::new(vec![vec![
            (min_lon, min_lat),
            (max_lon, min_lat),
            (max_lon, max_lat),
            (min_lon, max_lat),
            (min_lon, min_lat),
        ]])
    }

    pub fn rings(&self) -> &[Vec<(f64, f64)>] {
        &self.rings
    }

    pub fn exterior(&self) -> &[(f64, f64)] {
        &self.rings[0]
    }

    pub fn holes(&self) -> &[Vec<(f64, f64)>] {
        &self.rings[1..]
    }
}

/// Anything that can answer "is this lon/lat inside?".
pub trait Region: Sync {
    fn contains(&self, lon: f64, lat: f64) -> bool;
}

impl Region for RoiPolygon {
    fn contains(&self, lon: f64, lat: f64) -> bool {
        point_in_polygon((lon, lat), self)
    }
}

/// A union of polygons, as parsed from a GeoJSON document.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub polygons: Vec<RoiPolygon>,
}

impl Region for Roi {
    fn contains(&self, lon: f64, lat: f64) -> bool {
        self.polygons.iter().any(|p| point_in_polygon((lon, lat), p))
    }
}

/// Even-odd ray casting against a single ring.
///
/// A horizontal ray is cast towards +lon. An edge counts as crossed when its
/// endpoints straddle the ray half-open in latitude (`lat_a > y` differs from
/// `lat_b > y`) and the crossing lies strictly east of the point. Points on
/// the west or south boundary of a region are therefore inside, points on
/// the east or north boundary outside.
fn ring_contains(ring: &[(f64, f64)], (x, y): (f64, f64)) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (xa, ya) = w[0];
        let (xb, yb) = w[1];
        if (ya > y) != (yb > y) {
            let x_cross = xa + (y - ya) * (xb - xa) / (yb - ya);
            if x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// `true` iff `p` is inside the exterior ring and outside every hole.
pub fn point_in_polygon(p: (f64, f64), poly: &RoiPolygon) -> bool {
    ring_contains(poly.exterior(), p) && !poly.holes().iter().any(|h| ring_contains(h, p))
}

/// Valid-pixel mask: `scene.nodata_mask` AND "pixel centre inside `region`".
pub fn rasterize_mask<R: Region + ?Sized>(scene: &Scene, region: &R) -> Mask {
    let (w, h) = (scene.width, scene.height);
    let gt = scene.geotransform;
    let rows: Vec<Vec<bool>> = par::map_range(h, |r| {
        (0..w)
            .map(|c| {
                scene.nodata_mask[r * w + c] && {
                    let (lon, lat) = gt.pixel_center(r, c);
                    region.contains(lon, lat)
                }
            })
            .collect()
    });
    Mask {
        width: w,
        height: h,
        cells: rows.into_iter().flatten().collect(),
    }
}

/// Parses a GeoJSON ROI: a `Polygon` or `MultiPolygon` geometry, a `Feature`
/// carrying one, or a `FeatureCollection` of them (the union is returned).
pub fn parse_geojson(text: &str) -> Result<Roi> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::parse("geojson", e))?;
    let mut polygons = Vec::new();
    collect_polygons(&v, &mut polygons)?;
    if polygons.is_empty() {
        return Err(Error::parse("geojson", "no polygon geometry found"));
    }
    Ok(Roi { polygons })
}

fn collect_polygons(v: &Value, out: &mut Vec<RoiPolygon>) -> Result<()> {
    let ty = v
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse("geojson", "object without a \"type\" member"))?;
    match ty {
        "FeatureCollection" => {
            let feats = v
                .get("features")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::parse("geojson", "FeatureCollection without features"))?;
            for f in feats {
                collect_polygons(f, out)?;
            }
        }
        "Feature" => match v.get("geometry") {
            Some(Value::Null) | None => {}
            Some(g) => collect_polygons(g, out)?,
        },
        "Polygon" => out.push(parse_polygon_coords(coords(v)?)?),
        "MultiPolygon" => {
            let polys = coords(v)?
                .as_array()
                .ok_or_else(|| Error::parse("geojson", "MultiPolygon coordinates must be an array"))?;
            for p in polys {
                out.push(parse_polygon_coords(p)?);
            }
        }
        other => {
            return Err(Error::parse(
                "geojson",
                format!("unsupported geometry type {other}; expected Polygon or MultiPolygon"),
            ))
        }
    }
    Ok(())
}

fn coords(v: &Value) -> Result<&Value> {
    v.get("coordinates")
        .ok_or_else(|| Error::parse("geojson", "geometry without coordinates"))
}

fn parse_polygon_coords(v: &Value) -> Result<RoiPolygon> {
    let bad = || Error::parse("geojson", "polygon coordinates must be arrays of [lon, lat]");
    let rings = v.as_array().ok_or_else(bad)?;
    let mut parsed = Vec::with_capacity(rings.len());
    for ring in rings {
        let pts = ring.as_array().ok_or_else(bad)?;
        let mut r = Vec::with_capacity(pts.len());
        for p in pts {
            let xy = p.as_array().ok_or_else(bad)?;
            if xy.len() < 2 {
                return Err(bad());
            }
            let lon = xy[0].as_f64().ok_or_else(bad)?;
            let lat = xy[1].as_f64().ok_or_else(bad)?;
            r.push((lon, lat));
        }
        parsed.push(r);
    }
    RoiPolygon::new(parsed).map_err(|e| Error::parse("geojson", e))
}
