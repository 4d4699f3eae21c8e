//! Image-quality metrics on unit-range data and corpus-level reports.

mod embedder;
mod fid;
mod report;

pub use embedder::{EmbedderKind, FeatureEmbedder, EMBEDDER_SEED};
pub use fid::{fid, COV_REGULARIZATION};
pub use report::{
    render_table, Aggregate, MetricReport, TileMetrics, CSV_NAME, PUBLISHED_CRSYNTHNET, SUMMARY_NAME, TABLE_NAME,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_manifest, read_raster, MANIFEST_FILE};
use crate::error::{data_err, shape_err, Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::losses::ssim::{feasible_scales, ms_ssim_value, ssim_value, WINDOW};
use crate::tensor::{no_grad, Tensor};

/// PSNR reported for a zero-error prediction.
pub const PSNR_CAP: f64 = 100.0;

fn unit_pair(gen: &ImageTensor, reference: &ImageTensor) -> Result<(Tensor, Tensor)> {
    if gen.shape() != reference.shape() {
        return Err(shape_err!("metric operands differ: {:?} vs {:?}", gen.shape(), reference.shape()));
    }
    Ok((
        gen.to_range(ValueRange::Unit)?.into_tensor().detach(),
        reference.to_range(ValueRange::Unit)?.into_tensor().detach(),
    ))
}

fn mse_of(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

pub fn psnr(gen: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    let (a, b) = unit_pair(gen, reference)?;
    Ok(psnr_from_mse(mse_of(&a, &b)))
}

/// `10·log10(1 / mse)` for peak 1, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn mae(gen: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    let (a, b) = unit_pair(gen, reference)?;
    let n = a.numel() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

pub fn rmse(gen: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    let (a, b) = unit_pair(gen, reference)?;
    Ok(mse_of(&a, &b).sqrt())
}

/// Mean SSIM over channels and batch with the standard 11-tap window.
pub fn ssim(gen: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    let (a, b) = unit_pair(gen, reference)?;
    no_grad(|| ssim_value(&a, &b, WINDOW)?.item())
}

/// Five-scale MS-SSIM; tiles too small for every scale use fewer.
pub fn ms_ssim(gen: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    let (a, b) = unit_pair(gen, reference)?;
    let (_, _, h, w) = a.dims4()?;
    if h < WINDOW || w < WINDOW {
        return Err(shape_err!("ms-ssim window {WINDOW} does not fit a {h}x{w} image"));
    }
    no_grad(|| ms_ssim_value(&a, &b, WINDOW, feasible_scales(h, w, WINDOW))?.item())
}

pub fn tile_metrics(tile_id: &str, gen: &ImageTensor, reference: &ImageTensor) -> Result<TileMetrics> {
    Ok(TileMetrics {
        tile_id: tile_id.into(),
        psnr: psnr(gen, reference)?,
        ssim: ssim(gen, reference)?,
        ms_ssim: ms_ssim(gen, reference)?,
        mae: mae(gen, reference)?,
        rmse: rmse(gen, reference)?,
    })
}

/// Report over matched prediction/reference pairs, ordered by tile id.
pub fn report_from_pairs(
    model_name: &str,
    pairs: &[(String, ImageTensor, ImageTensor)],
    embedder: &FeatureEmbedder,
) -> Result<MetricReport> {
    let mut sorted: Vec<&(String, ImageTensor, ImageTensor)> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut per_tile = Vec::with_capacity(sorted.len());
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    for (id, g, r) in sorted {
        per_tile.push(tile_metrics(id, g, r)?);
        fa.extend(embedder.embed(g.to_range(ValueRange::Unit)?.tensor())?);
        fb.extend(embedder.embed(r.to_range(ValueRange::Unit)?.tensor())?);
    }
    let fid_value = fid(&fa, &fb)?;
    MetricReport::new(model_name, embedder.kind().tag(), per_tile, fid_value)
}

/// Tiles of a directory: a corpus root (its manifest's reference rasters) or a
/// flat directory of `<tile_id>.bin` / `.tif` files.
pub fn list_tiles(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.is_file() {
        let m = load_manifest(&manifest)?;
        return Ok(m.records.iter().map(|r| (r.tile_id.clone(), m.resolve(&r.paths.s2_t2))).collect());
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("bin" | "tif" | "tiff")) {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if out.insert(id.clone(), p).is_some() {
                return Err(data_err!("{}: tile {id} appears twice", dir.display()));
            }
        }
    }
    Ok(out)
}

fn read_unit_tile(path: &Path) -> Result<ImageTensor> {
    ImageTensor::new(read_raster(path)?.to_tensor(), ValueRange::Unit)
        .map_err(|e| data_err!("{}: {e}", path.display()))
}

/// Per-tile metrics and corpus FID for matching tile ids in two directories.
pub fn evaluate(
    predictions_dir: &Path,
    references_dir: &Path,
    embedder: &FeatureEmbedder,
    model_name: &str,
) -> Result<MetricReport> {
    let preds = list_tiles(predictions_dir)?;
    let refs = list_tiles(references_dir)?;
    let missing_ref: Vec<&str> = preds.keys().filter(|k| !refs.contains_key(*k)).map(String::as_str).collect();
    let missing_pred: Vec<&str> = refs.keys().filter(|k| !preds.contains_key(*k)).map(String::as_str).collect();
    if !missing_ref.is_empty() || !missing_pred.is_empty() {
        return Err(data_err!(
            "unmatched tiles; no reference for [{}], no prediction for [{}]",
            missing_ref.join(", "),
            missing_pred.join(", ")
        ));
    }
    if preds.is_empty() {
        return Err(data_err!("no tiles found in {}", predictions_dir.display()));
    }
    let pairs = preds
        .iter()
        .map(|(id, p)| Ok((id.clone(), read_unit_tile(p)?, read_unit_tile(&refs[id])?)))
        .collect::<Result<Vec<_>>>()?;
    report_from_pairs(model_name, &pairs, embedder)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit_img(shape: &[usize], seed: u64) -> ImageTensor {
        let t = Tensor::rand_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        ImageTensor::new(t, ValueRange::Unit).unwrap()
    }

    fn img(v: Vec<f64>, shape: &[usize]) -> ImageTensor {
        ImageTensor::new(Tensor::new(v, shape).unwrap(), ValueRange::Unit).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let x = unit_img(&[1, 3, 16, 16], 0);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        let a = img(vec![0.0; 4], &[1, 1, 2, 2]);
        let b = img(vec![0.1; 4], &[1, 1, 2, 2]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let base = Tensor::full(&[1, 3, 16, 16], 0.5);
        let noise = Tensor::rand_uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let r = ImageTensor::new(base.clone(), ValueRange::Unit).unwrap();
        let scores: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&a| {
                let g = ImageTensor::new(base.add(&noise.mul_scalar(a).unwrap()).unwrap(), ValueRange::Unit).unwrap();
                psnr(&g, &r).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2]);
    }

    #[test]
    fn mae_rmse_examples() {
        let a = img(vec![0.0; 4], &[1, 1, 2, 2]);
        assert_eq!((mae(&a, &a).unwrap(), rmse(&a, &a).unwrap()), (0.0, 0.0));
        let b = img(vec![0.0, 0.2, 0.0, 0.2], &[1, 1, 2, 2]);
        assert!((mae(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        assert!((rmse(&a, &b).unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ssim_examples() {
        let a = unit_img(&[1, 3, 32, 32], 4);
        let b = unit_img(&[1, 3, 32, 32], 5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-6);
        let c = img(vec![0.25; 256], &[1, 1, 16, 16]);
        let d = img(vec![0.75; 256], &[1, 1, 16, 16]);
        let k = 0.01f64 * 0.01;
        let lum = (2.0 * 0.25 * 0.75 + k) / (0.25f64.powi(2) + 0.75f64.powi(2) + k);
        assert!((ssim(&c, &d).unwrap() - lum).abs() < 1e-6);
        let tiny = unit_img(&[1, 1, 8, 8], 6);
        assert!(ssim(&tiny, &tiny).is_err());
        assert!(ms_ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn identical_corpus_report() {
        let pairs: Vec<_> = (0..3)
            .map(|i| {
                let x = unit_img(&[1, 3, 32, 32], i);
                (format!("t{i}"), x.clone(), x)
            })
            .collect();
        let r = report_from_pairs("m", &pairs, &FeatureEmbedder::optical()).unwrap();
        assert_eq!(r.aggregate.psnr, PSNR_CAP);
        assert!((r.aggregate.ssim - 1.0).abs() < 1e-9);
        assert_eq!((r.aggregate.mae, r.aggregate.rmse), (0.0, 0.0));
        assert!(r.fid.abs() < 1e-6);
        assert!(r.to_text().contains("PSNR"));
        assert_eq!(r.to_csv().unwrap().lines().count(), 4);
    }
}
