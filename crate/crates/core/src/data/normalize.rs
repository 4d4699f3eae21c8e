use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

use super::Raster;

/// Affine map `raw·scale + offset` into the signed network range, with an
/// optional clip applied to raw values first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub scale: f64,
    pub offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<(f64, f64)>,
}

impl NormalizationSpec {
    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        let spec = NormalizationSpec {
            scale,
            offset,
            clip: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Clips raw values to `[lo, hi]` and maps that interval onto `[-1, 1]`.
    pub fn from_interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(config_err!("normalization interval [{lo}, {hi}] is empty"));
        }
        let scale = 2.0 / (hi - lo);
        Ok(NormalizationSpec {
            scale,
            offset: -1.0 - lo * scale,
            clip: Some((lo, hi)),
        })
    }

    /// Unit-range reflectance.
    pub fn optical() -> Self {
        NormalizationSpec {
            scale: 2.0,
            offset: -1.0,
            clip: Some((0.0, 1.0)),
        }
    }

    /// Backscatter in dB clipped to `[-25, 0]`.
    pub fn sar_db() -> Self {
        NormalizationSpec::from_interval(-25.0, 0.0).expect("static interval")
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0.0 || !self.scale.is_finite() || !self.offset.is_finite() {
            return Err(config_err!(
                "normalization needs a finite non-zero scale, got scale {} offset {}",
                self.scale,
                self.offset
            ));
        }
        Ok(())
    }

    pub fn forward(&self, v: f64) -> f64 {
        let v = match self.clip {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        };
        v * self.scale + self.offset
    }

    pub fn inverse(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }
}

pub fn normalize(tile: &Raster, spec: &NormalizationSpec) -> Result<Raster> {
    spec.validate()?;
    tile.map(|v| spec.forward(f64::from(v)) as f32)
}

pub fn denormalize(tile: &Raster, spec: &NormalizationSpec) -> Result<Raster> {
    spec.validate()?;
    tile.map(|v| spec.inverse(f64::from(v)) as f32)
}
