use crate::error::{data_err, shape_err, Result};

use super::Raster;

/// Share of set pixels in a single-band binary mask.
pub fn cloud_fraction(mask: &Raster) -> Result<f64> {
    if mask.channels() != 1 {
        return Err(shape_err!("cloud mask must have 1 band, got {}", mask.channels()));
    }
    let mut set = 0usize;
    for &v in mask.data() {
        if v == 1.0 {
            set += 1;
        } else if v != 0.0 {
            return Err(data_err!("cloud mask value {v} is not binary"));
        }
    }
    Ok(set as f64 / mask.data().len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub tile: Raster,
    /// Per pixel: at least one cloud-free observation contributed.
    pub valid: Vec<bool>,
}

/// Per-pixel, per-band median over the cloud-free observations in the window.
/// Pixels with none are zero and marked invalid. Even counts average the two
/// middle values, so the result does not depend on input order.
pub fn make_composite(obs: &[(Raster, Raster)]) -> Result<Composite> {
    let (first, _) = obs.first().ok_or_else(|| data_err!("composite needs at least one observation"))?;
    let [c, h, w] = first.shape();
    for (i, (tile, mask)) in obs.iter().enumerate() {
        if tile.shape() != [c, h, w] || mask.shape() != [1, h, w] {
            return Err(shape_err!(
                "observation {i}: tile {:?} / mask {:?} not co-registered with {:?}",
                tile.shape(),
                mask.shape(),
                [c, h, w]
            ));
        }
        cloud_fraction(mask)?;
    }
    let hw = h * w;
    let mut out = vec![0.0f32; c * hw];
    let mut valid = vec![false; hw];
    let mut vals: Vec<f32> = Vec::with_capacity(obs.len());
    for p in 0..hw {
        valid[p] = obs.iter().any(|(_, m)| m.data()[p] == 0.0);
        if !valid[p] {
            continue;
        }
        for ch in 0..c {
            vals.clear();
            vals.extend(
                obs.iter()
                    .filter(|(_, m)| m.data()[p] == 0.0)
                    .map(|(t, _)| t.data()[ch * hw + p]),
            );
            vals.sort_by(f32::total_cmp);
            let k = vals.len();
            out[ch * hw + p] = if k % 2 == 1 {
                vals[k / 2]
            } else {
                ((f64::from(vals[k / 2 - 1]) + f64::from(vals[k / 2])) / 2.0) as f32
            };
        }
    }
    Ok(Composite {
        tile: Raster::new([c, h, w], out)?,
        valid,
    })
}
