//! Windowed SSIM and its multi-scale product, differentiable and shared by the
//! training loss and the evaluation metrics.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{shape_err, Result};
use crate::nn::avg_pool2;
use crate::tensor::Tensor;

pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// `[len - k + 1, len]` matrix applying a valid 1-D filter.
fn band_matrix(len: usize, taps: &[f64]) -> Tensor {
    let k = taps.len();
    let out = len - k + 1;
    let mut m = vec![0.0; out * len];
    for o in 0..out {
        m[o * len + o..o * len + o + k].copy_from_slice(taps);
    }
    Tensor::new(m, &[out, len]).expect("band matrix shape")
}

/// Valid separable Gaussian filtering of `[n, c, h, w]`.
fn filter(x: &Tensor, gh: &Tensor, gw: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (gh.dim(0), gw.dim(0));
    x.reshape(&[n * c * h, w])?
        .matmul_t(gw, false, true)?
        .reshape(&[n * c, h, ow])?
        .transpose(1, 2)?
        .reshape(&[n * c * ow, h])?
        .matmul_t(gh, false, true)?
        .reshape(&[n * c, ow, oh])?
        .transpose(1, 2)?
        .reshape(&[n, c, oh, ow])
}

/// Per-(sample, channel) SSIM and contrast-structure terms, each `[n, c]`, for
/// unit-range data and a window of `win` taps.
pub fn ssim_terms(x: &Tensor, y: &Tensor, win: usize) -> Result<(Tensor, Tensor)> {
    if x.shape() != y.shape() {
        return Err(shape_err!("ssim operands differ: {:?} vs {:?}", x.shape(), y.shape()));
    }
    let (_, _, h, w) = x.dims4()?;
    if win == 0 || win > h || win > w {
        return Err(shape_err!("ssim window {win} does not fit a {h}x{w} image"));
    }
    let taps = gaussian_window(win, SIGMA);
    let (gh, gw) = (band_matrix(h, &taps), band_matrix(w, &taps));
    let f = |t: &Tensor| filter(t, &gh, &gw);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mu_x = f(x)?;
    let mu_y = f(y)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = mu_x.mul(&mu_y)?;
    let s_xx = f(&x.sqr()?)?.sub(&mu_xx)?;
    let s_yy = f(&y.sqr()?)?.sub(&mu_yy)?;
    let s_xy = f(&x.mul(y)?)?.sub(&mu_xy)?;
    let cs_map = s_xy
        .mul_scalar(2.0)?
        .add_scalar(c2)?
        .div(&s_xx.add(&s_yy)?.add_scalar(c2)?)?;
    let lum = mu_xy
        .mul_scalar(2.0)?
        .add_scalar(c1)?
        .div(&mu_xx.add(&mu_yy)?.add_scalar(c1)?)?;
    let ssim_map = lum.mul(&cs_map)?;
    Ok((ssim_map.mean_axes(&[2, 3], false)?, cs_map.mean_axes(&[2, 3], false)?))
}

/// Mean SSIM over batch and channels.
pub fn ssim_value(x: &Tensor, y: &Tensor, win: usize) -> Result<Tensor> {
    ssim_terms(x, y, win)?.0.mean_all()
}

/// Largest scale count `≤ 5` whose coarsest level still holds a full window.
pub fn feasible_scales(h: usize, w: usize, win: usize) -> usize {
    let mut m = MS_WEIGHTS.len();
    while m > 1 && h.min(w) >> (m - 1) < win {
        m -= 1;
    }
    m
}

static SCALE_WARNED: AtomicBool = AtomicBool::new(false);

/// Multi-scale SSIM with `scales` levels; the standard weights are truncated
/// and renormalized when fewer than five levels are used.
pub fn ms_ssim_value(x: &Tensor, y: &Tensor, win: usize, scales: usize) -> Result<Tensor> {
    let scales = scales.clamp(1, MS_WEIGHTS.len());
    let total: f64 = MS_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_WEIGHTS[..scales].iter().map(|w| w / total).collect();
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut acc: Option<Tensor> = None;
    for (i, &wt) in weights.iter().enumerate() {
        let (s, cs) = ssim_terms(&a, &b, win)?;
        let term = if i + 1 == scales { s } else { cs };
        let factor = term.clamp_min(1e-8)?.powf(wt)?;
        acc = Some(match acc {
            Some(p) => p.mul(&factor)?,
            None => factor,
        });
        if i + 1 < scales {
            a = avg_pool2(&a)?;
            b = avg_pool2(&b)?;
        }
    }
    acc.expect("at least one scale").mean_all()
}

/// `1 − MS-SSIM` on unit-range data. Small tiles get fewer scales (logged once)
/// and, below 11 pixels, a window as large as the tile.
pub fn ms_ssim_loss_unit(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let win = WINDOW.min(h).min(w);
    let scales = feasible_scales(h, w, win);
    if scales < MS_WEIGHTS.len() && !SCALE_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("MS-SSIM on {h}x{w} tiles uses {scales} of {} scales", MS_WEIGHTS.len());
    }
    ms_ssim_value(x, y, win, scales)?.neg()?.add_scalar(1.0)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((g[0] - g[10]).abs() < 1e-18);
    }

    #[test]
    fn identical_images_score_one() {
        let x = unit(&[2, 3, 32, 32], 1);
        assert!((ssim_value(&x, &x, 11).unwrap().item().unwrap() - 1.0).abs() < 1e-12);
        assert!(ms_ssim_loss_unit(&x, &x).unwrap().item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_images_follow_luminance_formula() {
        let (a, b) = (0.2, 0.7);
        let x = Tensor::full(&[1, 1, 16, 16], a);
        let y = Tensor::full(&[1, 1, 16, 16], b);
        let c1 = K1 * K1;
        let lum = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((ssim_value(&x, &y, 11).unwrap().item().unwrap() - lum).abs() < 1e-9);
    }

    #[test]
    fn scale_count_tracks_tile_size() {
        assert_eq!(feasible_scales(256, 256, 11), 5);
        assert_eq!(feasible_scales(64, 64, 11), 3);
        assert_eq!(feasible_scales(8, 8, 8), 1);
        assert!(ssim_terms(&unit(&[1, 1, 8, 8], 0), &unit(&[1, 1, 8, 8], 1), 11).is_err());
    }
}
