//! JSON-lines tile manifest. Raster paths are relative to the manifest's
//! directory.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(config_err!("unknown split {s:?}; expected train, val or test")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilePaths {
    pub s1_t1: PathBuf,
    pub s1_t2: PathBuf,
    pub s2_t1: PathBuf,
    pub s2_t2: PathBuf,
    pub mask_t1: PathBuf,
    pub mask_t2: PathBuf,
}

impl TilePaths {
    pub fn all(&self) -> [(&'static str, &Path); 6] {
        [
            ("s1_t1", &self.s1_t1),
            ("s1_t2", &self.s1_t2),
            ("s2_t1", &self.s2_t1),
            ("s2_t2", &self.s2_t2),
            ("mask_t1", &self.mask_t1),
            ("mask_t2", &self.mask_t2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub tile_id: String,
    pub paths: TilePaths,
    pub split: Split,
    pub cloud_t1: f64,
    pub cloud_t2: f64,
    pub date_t1: NaiveDate,
    pub date_t2: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileManifest {
    /// Directory the relative raster paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl TileManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let m = TileManifest {
            root: root.into(),
            records,
        };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if r.tile_id.is_empty() {
                return Err(data_err!("manifest has an empty tile_id"));
            }
            if !seen.insert(r.tile_id.as_str()) {
                return Err(data_err!("duplicate tile_id {}", r.tile_id));
            }
            if r.date_t1 >= r.date_t2 {
                return Err(data_err!(
                    "tile {}: date_t1 {} is not before date_t2 {}",
                    r.tile_id,
                    r.date_t1,
                    r.date_t2
                ));
            }
            for (name, v) in [("cloud_t1", r.cloud_t1), ("cloud_t2", r.cloud_t2)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(data_err!("tile {}: {name} = {v} outside [0, 1]", r.tile_id));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a manifest; every referenced raster must exist.
pub fn load_manifest(path: &Path) -> Result<TileManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| data_err!("{} line {}: {e}", path.display(), i + 1))?;
        records.push(rec);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = TileManifest::new(root, records)?;
    for r in &m.records {
        for (name, p) in r.paths.all() {
            let full = m.resolve(p);
            if !full.is_file() {
                return Err(data_err!(
                    "tile {}: {name} raster {} does not exist",
                    r.tile_id,
                    full.display()
                ));
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> ManifestRecord {
        let p = |n: &str| PathBuf::from(format!("tiles/{id}/{n}.bin"));
        ManifestRecord {
            tile_id: id.into(),
            paths: TilePaths {
                s1_t1: p("s1_t1"),
                s1_t2: p("s1_t2"),
                s2_t1: p("s2_t1"),
                s2_t2: p("s2_t2"),
                mask_t1: p("mask_t1"),
                mask_t2: p("mask_t2"),
            },
            split: Split::Train,
            cloud_t1: 0.3,
            cloud_t2: 0.0,
            date_t1: NaiveDate::from_ymd_opt(2021, 7, 3).unwrap(),
            date_t2: NaiveDate::from_ymd_opt(2021, 7, 15).unwrap(),
        }
    }

    fn touch_all(root: &Path, r: &ManifestRecord) {
        for (_, p) in r.paths.all() {
            let f = root.join(p);
            fs::create_dir_all(f.parent().unwrap()).unwrap();
            fs::write(f, b"").unwrap();
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().records.is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let err = TileManifest::new(".", vec![record("a"), record("a")]).unwrap_err();
        assert!(err.to_string().contains("duplicate tile_id a"));
    }

    #[test]
    fn save_load_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = ["t0", "t1", "t2"].iter().map(|id| record(id)).collect();
        for r in &recs {
            touch_all(dir.path(), r);
        }
        let p = dir.path().join(MANIFEST_FILE);
        let m = TileManifest::new(dir.path(), recs).unwrap();
        m.save(&p).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.to_jsonl().unwrap(), fs::read_to_string(&p).unwrap());
    }

    #[test]
    fn dangling_path_and_bad_dates_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        TileManifest::new(dir.path(), vec![record("x")]).unwrap().save(&p).unwrap();
        assert!(load_manifest(&p).unwrap_err().to_string().contains("does not exist"));
        let mut r = record("y");
        r.date_t2 = r.date_t1;
        assert!(TileManifest::new(".", vec![r]).is_err());
    }
}
