//! Scene catalogs and the CSV manifest (`scene_id,date,cloud_pct,path`).

use std::collections::HashSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::SceneMeta;
use crate::{Error, Result};

/// Keeps the entries with `cloud_cover_pct < max_cloud_pct` acquired within
/// `[date_start, date_end]` (inclusive), in input order.
pub fn filter_catalog(
    catalog: &[SceneMeta],
    max_cloud_pct: f64,
    date_start: NaiveDate,
    date_end: NaiveDate,
) -> Result<Vec<SceneMeta>> {
    if date_start > date_end {
        return Err(Error::invalid(format!(
            "date range {date_start}..{date_end} is reversed"
        )));
    }
    if !(0.0..=100.0).contains(&max_cloud_pct) {
        return Err(Error::invalid(format!(
            "max cloud cover {max_cloud_pct} outside [0, 100]"
        )));
    }
    Ok(catalog
        .iter()
        .filter(|m| {
            m.cloud_cover_pct < max_cloud_pct
                && m.acquisition_date >= date_start
                && m.acquisition_date <= date_end
        })
        .cloned()
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    scene_id: String,
    date: NaiveDate,
    cloud_pct: f64,
    path: String,
}

/// Reads a manifest. Scene ids must be unique and cloud cover within `[0, 100]`.
pub fn read_manifest(path: &Path) -> Result<Vec<SceneMeta>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display(), e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(path.display(), e))?;
        let line = i + 2;
        if !(0.0..=100.0).contains(&row.cloud_pct) {
            return Err(Error::parse(
                format!("{}:{line}", path.display()),
                format!("cloud_pct {} outside [0, 100]", row.cloud_pct),
            ));
        }
        if !seen.insert(row.scene_id.clone()) {
            return Err(Error::parse(
                format!("{}:{line}", path.display()),
                format!("duplicate scene_id {}", row.scene_id),
            ));
        }
        out.push(SceneMeta {
            scene_id: row.scene_id,
            acquisition_date: row.date,
            cloud_cover_pct: row.cloud_pct,
            path: row.path.into(),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, catalog: &[SceneMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display(), e))?;
    for m in catalog {
        w.serialize(ManifestRow {
            scene_id: m.scene_id.clone(),
            date: m.acquisition_date,
            cloud_pct: m.cloud_cover_pct,
            path: m.path.to_string_lossy().into_owned(),
        })
        .map_err(|e| Error::parse(path.display(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn meta(id: &str, date: &str, cloud: f64) -> SceneMeta {
        SceneMeta {
            scene_id: id.into(),
            acquisition_date: date.parse().unwrap(),
            cloud_cover_pct: cloud,
            path: format!("{id}.hdr").into(),
        }
    }

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn cloud_threshold_is_strict() {
        let cat = vec![
            meta("a", "2023-06-10", 5.0),
            meta("b", "2023-07-01", 12.0),
            meta("c", "2023-08-20", 9.0),
        ];
        let out = filter_catalog(&cat, 10.0, d("2023-06-01"), d("2023-08-31")).unwrap();
        let ids: Vec<_> = out.iter().map(|m| m.scene_id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);

        let edge = vec![meta("x", "2023-06-10", 10.0)];
        assert!(filter_catalog(&edge, 10.0, d("2023-06-01"), d("2023-08-31"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn date_window_is_inclusive() {
        let cat = vec![
            meta("early", "2023-05-31", 1.0),
            meta("first", "2023-06-01", 1.0),
            meta("last", "2023-08-31", 1.0),
            meta("late", "2023-09-01", 1.0),
        ];
        let out = filter_catalog(&cat, 10.0, d("2023-06-01"), d("2023-08-31")).unwrap();
        let ids: Vec<_> = out.iter().map(|m| m.scene_id.as_str()).collect();
        assert_eq!(ids, ["first", "last"]);
    }

    #[test]
    fn empty_catalog_and_bad_range() {
        assert!(filter_catalog(&[], 10.0, d("2023-06-01"), d("2023-08-31"))
            .unwrap()
            .is_empty());
        assert!(matches!(
            filter_catalog(&[], 10.0, d("2023-09-01"), d("2023-08-31")),
            Err(Error::InvalidArgument(_))
        ));
        assert!(filter_catalog(&[], 101.0, d("2023-06-01"), d("2023-08-31")).is_err());
    }

    #[test]
    fn permissive_filter_matches_linear_scan() {
        let mut rng = seed::rng(3, "catalog-test");
        for _ in 0..20 {
            let n = rng.random_range(0..60);
            let cat: Vec<_> = (0..n)
                .map(|i| {
                    let day = rng.random_range(0..365);
                    let date = d("2023-01-01") + chrono::Days::new(day);
                    SceneMeta {
                        scene_id: format!("s{i}"),
                        acquisition_date: date,
                        cloud_cover_pct: rng.random_range(0.0..99.9),
                        path: "p".into(),
                    }
                })
                .collect();
            let out = filter_catalog(&cat, 100.0, d("2023-01-01"), d("2023-12-31")).unwrap();
            assert_eq!(out, cat);

            // general window against a hand-written scan
            let (s, e) = (d("2023-03-01"), d("2023-09-30"));
            let mut oracle = Vec::new();
            for m in &cat {
                if m.cloud_cover_pct < 40.0 && s <= m.acquisition_date && m.acquisition_date <= e {
                    oracle.push(m.clone());
                }
            }
            assert_eq!(filter_catalog(&cat, 40.0, s, e).unwrap(), oracle);
        }
    }

    #[test]
    fn manifest_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("catalog.csv");
        let cat = vec![meta("a", "2023-06-10", 5.5), meta("b", "2023-07-01", 12.0)];
        write_manifest(&p, &cat).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("scene_id,date,cloud_pct,path\n"));
        assert_eq!(read_manifest(&p).unwrap(), cat);

        std::fs::write(&p, "scene_id,date,cloud_pct,path\na,2023-06-01,1,x\na,2023-06-02,1,y\n")
            .unwrap();
        let err = read_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("duplicate scene_id a"), "{err}");
    }
}
