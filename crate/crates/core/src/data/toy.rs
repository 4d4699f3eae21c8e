//! Procedural scenes standing in for real Sentinel-1/2 pairs: land cover over
//! smooth terrain, a perturbed earlier date with a cloud layer, and SAR derived
//! from optical structure with multiplicative gamma speckle.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use sha2::{Digest, Sha256};

use crate::error::{config_err, data_err, Error, Result};

use super::manifest::{ManifestRecord, Split, TileManifest, TilePaths, MANIFEST_FILE};
use super::raster::{sidecar_path, write_blob};
use super::{cloud_fraction, GeoBox, Raster, SceneInstance};

/// Toy tiles must be a multiple of this (the coarsest stride any supported
/// generator configuration needs).
pub const TOY_TILE_MULTIPLE: usize = 32;
pub const DEFAULT_TOY_SIZE: usize = 64;
pub const MAX_CLOUD_TARGET: f64 = 0.95;
pub const CLOUD_TOLERANCE: f64 = 0.05;
const SPECKLE_SHAPE: f64 = 4.0;

const CLASS_COLORS: [[f64; 3]; 5] = [
    [0.05, 0.09, 0.16], // water
    [0.07, 0.22, 0.09], // forest
    [0.28, 0.42, 0.14], // cropland
    [0.48, 0.40, 0.29], // bare soil
    [0.56, 0.55, 0.53], // built-up
];
const WATER: usize = 0;
const BUILT: usize = 4;

/// Sum of bilinearly upsampled random lattices, rescaled to `[0, 1]`.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize, octaves: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp = 1.0;
    for o in 0..octaves {
        let g = cells << o;
        let lattice: Vec<f64> = (0..(g + 1) * (g + 1)).map(|_| rng.random::<f64>()).collect();
        for y in 0..size {
            let fy = y as f64 / size as f64 * g as f64;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..size {
                let fx = x as f64 / size as f64 * g as f64;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let at = |yy: usize, xx: usize| lattice[yy * (g + 1) + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[y * size + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp *= 0.5;
    }
    let (lo, hi) = out.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out
}

fn land_cover(rng: &mut ChaCha8Rng, size: usize, terrain: &[f64]) -> Vec<usize> {
    let mut class: Vec<usize> = terrain
        .iter()
        .map(|&t| match t {
            t if t < 0.18 => WATER,
            t if t < 0.55 => 2,
            t if t < 0.8 => 1,
            _ => 3,
        })
        .collect();
    let fields = rng.random_range(6..13);
    for _ in 0..fields {
        let (w, h) = (rng.random_range(size / 8..size / 3), rng.random_range(size / 8..size / 3));
        let (x0, y0) = (rng.random_range(0..size - w), rng.random_range(0..size - h));
        let c = rng.random_range(1..5);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if class[y * size + x] != WATER {
                    class[y * size + x] = c;
                }
            }
        }
    }
    let roads = rng.random_range(1..4);
    for _ in 0..roads {
        let horizontal = rng.random_bool(0.5);
        let pos = rng.random_range(0..size);
        let width = rng.random_range(1..3);
        for i in 0..size {
            for k in 0..width {
                let p = (pos + k).min(size - 1);
                let idx = if horizontal { p * size + i } else { i * size + p };
                class[idx] = BUILT;
            }
        }
    }
    class
}

fn render(class: &[usize], terrain: &[f64], texture: &[f64], tint: &[[f64; 3]; 5], size: usize) -> Vec<f64> {
    let hw = size * size;
    let mut out = vec![0.0; 3 * hw];
    for p in 0..hw {
        let shade = 0.8 + 0.4 * terrain[p];
        for ch in 0..3 {
            let base = CLASS_COLORS[class[p]][ch] * tint[class[p]][ch];
            out[ch * hw + p] = (base * shade + 0.04 * (texture[p] - 0.5)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Threshold on `field` whose exceedance fraction is closest to `target`.
fn cloud_threshold(field: &[f64], target: f64) -> (f64, f64) {
    let frac = |t: f64| field.iter().filter(|&&v| v > t).count() as f64 / field.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (fl, fh) = (frac(lo), frac(hi));
    if (fl - target).abs() < (fh - target).abs() {
        (lo, fl)
    } else {
        (hi, fh)
    }
}

/// Backscatter in dB from optical structure: brightness, gradient magnitude and
/// 3×3 local standard deviation, with gamma speckle applied in linear power.
fn simulate_sar(optical: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let hw = size * size;
    let lum: Vec<f64> = (0..hw)
        .map(|p| 0.3 * optical[p] + 0.59 * optical[hw + p] + 0.11 * optical[2 * hw + p])
        .collect();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, size as isize - 1) as usize;
        let x = x.clamp(0, size as isize - 1) as usize;
        lum[y * size + x]
    };
    let speckle = Gamma::new(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE).expect("valid gamma");
    let mut out = vec![0.0; 2 * hw];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let gx = at(y, x + 1) - at(y, x - 1);
            let gy = at(y + 1, x) - at(y - 1, x);
            let grad = (gx * gx + gy * gy).sqrt();
            let (mut s, mut s2) = (0.0, 0.0);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = at(y + dy, x + dx);
                    s += v;
                    s2 += v * v;
                }
            }
            let std = (s2 / 9.0 - (s / 9.0).powi(2)).max(0.0).sqrt();
            let rough = (4.0 * grad + 6.0 * std).min(1.0);
            let vv_db = -19.0 + 9.0 * at(y, x) + 8.0 * rough;
            let p = y as usize * size + x as usize;
            for (band, offset) in [(0, 0.0), (1, -7.0)] {
                let linear = 10f64.powf((vv_db + offset) / 10.0) * speckle.sample(rng);
                out[band * hw + p] = (10.0 * linear.log10()).clamp(-25.0, 0.0);
            }
        }
    }
    out
}

fn to_raster(c: usize, size: usize, v: &[f64]) -> Result<Raster> {
    Raster::new([c, size, size], v.iter().map(|&x| x as f32).collect())
}

pub fn validate_toy_size(size: usize) -> Result<()> {
    if size == 0 || size % TOY_TILE_MULTIPLE != 0 {
        return Err(config_err!("toy tile size {size} must be a positive multiple of {TOY_TILE_MULTIPLE}"));
    }
    Ok(())
}

/// Fully seed-determined toy scene. `tile_id` is `toy_<seed>`.
pub fn generate_toy_scene(seed: u64, size: usize, cloud_fraction_target: f64) -> Result<SceneInstance> {
    validate_toy_size(size)?;
    if !(0.0..=MAX_CLOUD_TARGET).contains(&cloud_fraction_target) {
        return Err(config_err!(
            "cloud fraction target {cloud_fraction_target} outside [0, {MAX_CLOUD_TARGET}]"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = size * size;
    let terrain = smooth_noise(&mut rng, size, 4, 3);
    let texture = smooth_noise(&mut rng, size, size / 4, 1);
    let class_t2 = land_cover(&mut rng, size, &terrain);

    // the earlier date differs by season tint and a few re-used fields
    let mut class_t1 = class_t2.clone();
    for _ in 0..rng.random_range(1..4) {
        let (w, h) = (rng.random_range(size / 8..size / 4), rng.random_range(size / 8..size / 4));
        let (x0, y0) = (rng.random_range(0..size - w), rng.random_range(0..size - h));
        let c = rng.random_range(0..4);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                class_t1[y * size + x] = c;
            }
        }
    }
    let flat = [[1.0; 3]; 5];
    let mut tint = flat;
    let gain = 0.93 + 0.14 * rng.random::<f64>();
    for row in tint.iter_mut() {
        for v in row.iter_mut() {
            *v = gain * (0.9 + 0.2 * rng.random::<f64>());
        }
    }
    let ref_opt = render(&class_t2, &terrain, &texture, &flat, size);
    let clear_t1 = render(&class_t1, &terrain, &texture, &tint, size);

    let clouds = smooth_noise(&mut rng, size, 3, 4);
    let mut mask_t1 = vec![0.0; hw];
    let mut cloudy_t1 = clear_t1.clone();
    if cloud_fraction_target > 0.0 {
        let (thr, achieved) = cloud_threshold(&clouds, cloud_fraction_target);
        if (achieved - cloud_fraction_target).abs() > CLOUD_TOLERANCE {
            return Err(data_err!(
                "cloud fraction {cloud_fraction_target} unreachable for seed {seed}; closest is {achieved:.3}"
            ));
        }
        for p in 0..hw {
            if clouds[p] > thr {
                mask_t1[p] = 1.0;
                let alpha = (0.6 + (clouds[p] - thr) * 4.0).min(1.0);
                for ch in 0..3 {
                    let v = &mut cloudy_t1[ch * hw + p];
                    *v = (1.0 - alpha) * *v + alpha * 0.92;
                }
            }
        }
    }

    let s1_t1 = simulate_sar(&clear_t1, size, &mut rng);
    let s1_t2 = simulate_sar(&ref_opt, size, &mut rng);

    let july = |d: u64| NaiveDate::from_ymd_opt(2021, 7, 1).unwrap() + Days::new(d);
    let d1 = rng.random_range(0..15u64);
    let d2 = d1 + rng.random_range(6..17u64);
    let span = 0.05;
    let lon = GeoBox::STUDY_AREA.lon_min + rng.random::<f64>() * (4.0 - span);
    let lat = GeoBox::STUDY_AREA.lat_min + rng.random::<f64>() * (3.5 - span);

    let scene = SceneInstance {
        tile_id: format!("toy_{seed}"),
        s1_t1: to_raster(2, size, &s1_t1)?,
        s1_t2: to_raster(2, size, &s1_t2)?,
        s2_t1: to_raster(3, size, &cloudy_t1)?,
        s2_t2_ref: to_raster(3, size, &ref_opt)?,
        cloud_mask_t1: to_raster(1, size, &mask_t1)?,
        cloud_mask_t2: Raster::filled([1, size, size], 0.0)?,
        geo: Some(GeoBox {
            lon_min: lon,
            lon_max: lon + span,
            lat_min: lat,
            lat_max: lat + span,
        }),
        date_t1: july(d1),
        date_t2: july(d2),
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    pub root: PathBuf,
    pub n: usize,
    /// Hex SHA-256 over the manifest and every raster and sidecar, in order.
    pub hash: String,
}

/// Split assignment: a tenth each to test and val (rounded down), rest train.
fn split_for(i: usize, n: usize) -> Split {
    let held = n / 10;
    if i < n - 2 * held {
        Split::Train
    } else if i < n - held {
        Split::Val
    } else {
        Split::Test
    }
}

/// Writes `<root>/tiles/<tile_id>/<raster>.bin` plus sidecars and
/// `<root>/manifest.jsonl`. A non-empty `root` needs `force`.
pub fn write_toy_corpus(
    root: &Path,
    n: usize,
    size: usize,
    master_seed: u64,
    cloud: f64,
    force: bool,
) -> Result<CorpusSummary> {
    validate_toy_size(size)?;
    if !(0.0..=MAX_CLOUD_TARGET).contains(&cloud) {
        return Err(config_err!("cloud fraction target {cloud} outside [0, {MAX_CLOUD_TARGET}]"));
    }
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty && !force {
            return Err(config_err!("{} is not empty; pass --force to overwrite", root.display()));
        }
        for stale in [root.join("tiles"), root.join(MANIFEST_FILE)] {
            if stale.is_dir() {
                fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
            } else if stale.is_file() {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut seeder = ChaCha8Rng::seed_from_u64(master_seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene_seed = seeder.random::<u64>();
        let mut scene = generate_toy_scene(scene_seed, size, cloud)?;
        scene.tile_id = format!("toy_{i:05}");
        let rel = |name: &str| PathBuf::from("tiles").join(&scene.tile_id).join(format!("{name}.bin"));
        let paths = TilePaths {
            s1_t1: rel("s1_t1"),
            s1_t2: rel("s1_t2"),
            s2_t1: rel("s2_t1"),
            s2_t2: rel("s2_t2"),
            mask_t1: rel("mask_t1"),
            mask_t2: rel("mask_t2"),
        };
        let rasters = [
            &scene.s1_t1,
            &scene.s1_t2,
            &scene.s2_t1,
            &scene.s2_t2_ref,
            &scene.cloud_mask_t1,
            &scene.cloud_mask_t2,
        ];
        for ((_, p), r) in paths.all().into_iter().zip(rasters) {
            write_blob(&root.join(p), r, scene.geo)?;
        }
        records.push(ManifestRecord {
            tile_id: scene.tile_id.clone(),
            paths,
            split: split_for(i, n),
            cloud_t1: cloud_fraction(&scene.cloud_mask_t1)?,
            cloud_t2: cloud_fraction(&scene.cloud_mask_t2)?,
            date_t1: scene.date_t1,
            date_t2: scene.date_t2,
        });
    }
    let manifest = TileManifest::new(root, records)?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(CorpusSummary {
        root: root.to_path_buf(),
        n,
        hash: corpus_hash(&manifest)?,
    })
}

pub fn corpus_hash(manifest: &TileManifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest.to_jsonl()?.as_bytes());
    for r in &manifest.records {
        for (_, p) in r.paths.all() {
            let full = manifest.resolve(p);
            for f in [full.clone(), sidecar_path(&full)] {
                if f.is_file() {
                    h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
                }
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    #[test]
    fn scenes_are_seed_determined() {
        let a = generate_toy_scene(3, 32, 0.3).unwrap();
        let b = generate_toy_scene(3, 32, 0.3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_toy_scene(4, 32, 0.3).unwrap());
    }

    #[test]
    fn cloud_targets_are_met() {
        let clear = generate_toy_scene(1, 64, 0.0).unwrap();
        assert_eq!(cloud_fraction(&clear.cloud_mask_t1).unwrap(), 0.0);
        for seed in 0..5 {
            let s = generate_toy_scene(seed, 64, 0.3).unwrap();
            let f = cloud_fraction(&s.cloud_mask_t1).unwrap();
            assert!((0.25..=0.35).contains(&f), "seed {seed}: {f}");
        }
        assert!(generate_toy_scene(0, 64, 0.99).unwrap_err().is_validation());
        assert!(generate_toy_scene(0, 66, 0.1).unwrap_err().is_validation());
    }

    #[test]
    fn rasters_stay_in_declared_ranges() {
        let s = generate_toy_scene(9, 32, 0.5).unwrap();
        for r in [&s.s2_t1, &s.s2_t2_ref] {
            assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for r in [&s.s1_t1, &s.s1_t2] {
            assert!(r.data().iter().all(|v| (-25.0..=0.0).contains(v)));
        }
        assert!(GeoBox::STUDY_AREA.contains(&s.geo.unwrap()));
    }

    #[test]
    fn corpus_is_reproducible_and_guarded() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_toy_corpus(&dir.path().join("a"), 3, 32, 7, 0.2, false).unwrap();
        let b = write_toy_corpus(&dir.path().join("b"), 3, 32, 7, 0.2, false).unwrap();
        assert_eq!(a.hash, b.hash);
        assert!(write_toy_corpus(&dir.path().join("a"), 3, 32, 7, 0.2, false).is_err());
        let again = write_toy_corpus(&dir.path().join("a"), 3, 32, 7, 0.2, true).unwrap();
        assert_eq!(again.hash, a.hash);
        let m = load_manifest(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.records.len(), 3);
    }
}
