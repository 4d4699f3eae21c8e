use chrono::NaiveDate;

use crate::error::{data_err, shape_err, Result};

use super::manifest::{ManifestRecord, TileManifest};
use super::raster::{read_blob, read_raster};
use super::{cloud_fraction, GeoBox, Raster};

pub const SAR_BANDS: usize = 2;
pub const OPTICAL_BANDS: usize = 3;
/// References must be nearly cloud-free.
pub const MAX_REFERENCE_CLOUD: f64 = 0.05;

/// One sample: SAR at both dates, the cloudy optical input, the clear
/// reference and both cloud masks. SAR is in dB, optical in unit reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub tile_id: String,
    pub s1_t1: Raster,
    pub s1_t2: Raster,
    pub s2_t1: Raster,
    pub s2_t2_ref: Raster,
    pub cloud_mask_t1: Raster,
    pub cloud_mask_t2: Raster,
    pub geo: Option<GeoBox>,
    pub date_t1: NaiveDate,
    pub date_t2: NaiveDate,
}

impl SceneInstance {
    pub fn height(&self) -> usize {
        self.s2_t2_ref.height()
    }

    pub fn width(&self) -> usize {
        self.s2_t2_ref.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let bands = [
            ("s1_t1", &self.s1_t1, SAR_BANDS),
            ("s1_t2", &self.s1_t2, SAR_BANDS),
            ("s2_t1", &self.s2_t1, OPTICAL_BANDS),
            ("s2_t2", &self.s2_t2_ref, OPTICAL_BANDS),
            ("mask_t1", &self.cloud_mask_t1, 1),
            ("mask_t2", &self.cloud_mask_t2, 1),
        ];
        for (name, r, c) in bands {
            if r.shape() != [c, h, w] {
                return Err(shape_err!(
                    "tile {}: {name} has shape {:?}, expected {:?}",
                    self.tile_id,
                    r.shape(),
                    [c, h, w]
                ));
            }
        }
        cloud_fraction(&self.cloud_mask_t1)?;
        let ref_cloud = cloud_fraction(&self.cloud_mask_t2)?;
        if ref_cloud >= MAX_REFERENCE_CLOUD {
            return Err(data_err!(
                "tile {}: reference cloud fraction {ref_cloud:.3} is not below {MAX_REFERENCE_CLOUD}",
                self.tile_id
            ));
        }
        if self.date_t1 >= self.date_t2 {
            return Err(data_err!("tile {}: dates are not ordered", self.tile_id));
        }
        if let Some(g) = &self.geo {
            if !g.is_valid() || !GeoBox::STUDY_AREA.contains(g) {
                return Err(data_err!("tile {}: geo box {g:?} outside the dataset bounds", self.tile_id));
            }
        }
        Ok(())
    }
}

/// Reads and validates the rasters of one manifest record.
pub fn load_scene(manifest: &TileManifest, rec: &ManifestRecord) -> Result<SceneInstance> {
    let read = |p: &std::path::Path| {
        read_raster(&manifest.resolve(p)).map_err(|e| data_err!("tile {}: {e}", rec.tile_id))
    };
    let ref_path = manifest.resolve(&rec.paths.s2_t2);
    let geo = if ref_path.extension().is_some_and(|e| e == "bin") {
        read_blob(&ref_path)?.1.geo
    } else {
        None
    };
    let scene = SceneInstance {
        tile_id: rec.tile_id.clone(),
        s1_t1: read(&rec.paths.s1_t1)?,
        s1_t2: read(&rec.paths.s1_t2)?,
        s2_t1: read(&rec.paths.s2_t1)?,
        s2_t2_ref: read(&rec.paths.s2_t2)?,
        cloud_mask_t1: read(&rec.paths.mask_t1)?,
        cloud_mask_t2: read(&rec.paths.mask_t2)?,
        geo,
        date_t1: rec.date_t1,
        date_t2: rec.date_t2,
    };
    scene.validate()?;
    Ok(scene)
}
