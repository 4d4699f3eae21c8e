use std::sync::Arc;

use rand::Rng;

use super::{Builder, Ctx, Param};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{no_grad, Tensor};

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = fan_in_bound(in_channels * kernel * kernel);
        let weight = b.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound)?;
        let bias = if bias {
            Some(b.uniform("bias", &[out_channels], bound)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, &self.weight.get())
    }

    pub(crate) fn forward_with_weight(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(config_err!(
                "{}: expected {} input channels, got {c}",
                self.weight.name(),
                self.in_channels
            ));
        }
        let y = x.conv2d(w, self.stride, self.padding)?;
        match &self.bias {
            Some(bias) => y.add(&bias.get().reshape(&[1, self.out_channels, 1, 1])?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution with PyTorch weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        b: &Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        let bound = fan_in_bound(out_channels * kernel * kernel);
        Ok(ConvTranspose2d {
            weight: b.uniform("weight", &[in_channels, out_channels, kernel, kernel], bound)?,
            bias: b.uniform("bias", &[out_channels], bound)?,
            in_channels,
            out_channels,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(config_err!(
                "{}: expected {} input channels, got {c}",
                self.weight.name(),
                self.in_channels
            ));
        }
        x.conv_transpose2d(&self.weight.get(), self.stride, self.padding, self.output_padding)?
            .add(&self.bias.get().reshape(&[1, self.out_channels, 1, 1])?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(b: &Builder, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        let bound = fan_in_bound(in_features);
        Ok(Linear {
            weight: b.uniform("weight", &[out_features, in_features], bound)?,
            bias: if bias {
                Some(b.uniform("bias", &[out_features], bound)?)
            } else {
                None
            },
            in_features,
            out_features,
        })
    }

    /// Applies to the last axis of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = *x.shape().last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if last != self.in_features {
            return Err(config_err!(
                "{}: expected {} features, got {last}",
                self.weight.name(),
                self.in_features
            ));
        }
        let rows = x.numel() / last;
        let y = x
            .reshape(&[rows, last])?
            .matmul_t(&self.weight.get(), false, true)?;
        let y = match &self.bias {
            Some(bias) => y.add(&bias.get())?,
            None => y,
        };
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.out_features;
        y.reshape(&shape)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: b.param("weight", Tensor::ones(&[dim]))?,
            bias: b.param("bias", Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ax = x.rank() - 1;
        let mean = x.mean_axes(&[ax], true)?;
        let centered = x.sub(&mean)?;
        let var = centered.sqr()?.mean_axes(&[ax], true)?;
        centered
            .div(&var.add_scalar(self.eps)?.sqrt()?)?
            .mul(&self.weight.get())?
            .add(&self.bias.get())
    }
}

/// Per-sample, per-channel standardization with a learnable affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(InstanceNorm2d {
            weight: b.param("weight", Tensor::ones(&[channels]))?,
            bias: b.param("bias", Tensor::zeros(&[channels]))?,
            eps: 1e-5,
        })
    }

    /// Standardized map before the affine step.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h * w < 2 {
            return Err(shape_err!(
                "instance norm needs at least 2 spatial positions, got {h}x{w}"
            ));
        }
        let mean = x.mean_axes(&[2, 3], true)?;
        let centered = x.sub(&mean)?;
        let var = centered.sqr()?.mean_axes(&[2, 3], true)?;
        centered.div(&var.add_scalar(self.eps)?.sqrt()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1);
        self.normalize(x)?
            .mul(&self.weight.get().reshape(&[1, c, 1, 1])?)?
            .add(&self.bias.get().reshape(&[1, c, 1, 1])?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: b.param("weight", Tensor::ones(&[channels]))?,
            bias: b.param("bias", Tensor::zeros(&[channels]))?,
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels]))?,
            running_var: b.buffer("running_var", Tensor::ones(&[channels]))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let per = |t: Tensor| t.reshape(&[1, c, 1, 1]);
        let normed = if train {
            let count = n * h * w;
            if count < 2 {
                return Err(shape_err!("batch norm in training needs more than one value per channel"));
            }
            let mean = x.mean_axes(&[0, 2, 3], true)?;
            let centered = x.sub(&mean)?;
            let var = centered.sqr()?.mean_axes(&[0, 2, 3], true)?;
            let unbiased = count as f64 / (count - 1) as f64;
            let m = self.momentum;
            let rm: Vec<f64> = self
                .running_mean
                .get()
                .data()
                .iter()
                .zip(mean.data())
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            let rv: Vec<f64> = self
                .running_var
                .get()
                .data()
                .iter()
                .zip(var.data())
                .map(|(r, b)| (1.0 - m) * r + m * b * unbiased)
                .collect();
            self.running_mean.set(Tensor::new(rm, &[c])?)?;
            self.running_var.set(Tensor::new(rv, &[c])?)?;
            centered.div(&var.add_scalar(self.eps)?.sqrt()?)?
        } else {
            let mean = per(self.running_mean.get())?;
            let std = per(self.running_var.get())?.add_scalar(self.eps)?.sqrt()?;
            x.sub(&mean)?.div(&std)?
        };
        normed
            .mul(&per(self.weight.get())?)?
            .add(&per(self.bias.get())?)
    }
}

/// Divides a `[rows, cols]` matrix by a power-iteration estimate of its top
/// singular value. `u` is the persistent left vector; it is refined `iters`
/// times and written back. Returns the normalized matrix and the estimate.
///
/// The estimate `uᵀ W v` stays differentiable in `W`; `u` and `v` do not.
pub fn spectral_normalize(w: &Tensor, u: &mut Vec<f64>, iters: usize) -> Result<(Tensor, f64)> {
    const EPS: f64 = 1e-12;
    let (rows, cols) = match w.shape() {
        &[r, c] if r > 0 && c > 0 => (r, c),
        s => return Err(shape_err!("spectral norm needs a non-empty matrix, got {s:?}")),
    };
    if u.len() != rows {
        return Err(shape_err!("power-iteration vector has length {}, expected {rows}", u.len()));
    }
    let wd = w.data();
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut v = vec![0.0; cols];
    for _ in 0..iters.max(1) {
        v.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            for c in 0..cols {
                v[c] += wd[r * cols + c] * u[r];
            }
        }
        normalize(&mut v);
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = (0..cols).map(|c| wd[r * cols + c] * v[c]).sum();
        }
        normalize(u);
    }
    let ut = Tensor::new(u.clone(), &[1, rows])?;
    let vt = Tensor::new(v, &[cols, 1])?;
    let sigma = ut.matmul(w)?.matmul(&vt)?.reshape(&[])?;
    let sigma_val = sigma.item()?;
    let normalized = w.div(&sigma.clamp_min(EPS)?)?;
    Ok((normalized, sigma_val))
}

/// Convolution whose kernel is spectrally normalized on every call.
#[derive(Debug, Clone)]
pub struct SnConv2d {
    pub conv: Conv2d,
    pub u: Param,
    pub iters: usize,
}

impl SnConv2d {
    pub fn new(
        b: &Builder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        iters: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(b, in_channels, out_channels, kernel, stride, padding, true)?;
        let u0 = b.randn_buffer("sn_u", &[out_channels])?;
        let mut unit = u0.get().to_vec();
        let n = unit.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        unit.iter_mut().for_each(|x| *x /= n);
        u0.set(Tensor::new(unit, &[out_channels])?)?;
        Ok(SnConv2d { conv, u: u0, iters })
    }

    /// The normalized kernel. Training mode refines and stores `u`; evaluation
    /// reuses the stored vector with a single non-persistent refinement.
    pub fn normalized_weight(&self, train: bool) -> Result<Tensor> {
        let w = self.conv.weight.get();
        let shape = w.shape().to_vec();
        let mat = w.reshape(&[shape[0], shape[1..].iter().product()])?;
        let mut u = self.u.get().to_vec();
        let iters = if train { self.iters } else { 1 };
        let (normed, _) = spectral_normalize(&mat, &mut u, iters)?;
        if train {
            self.u.set(Tensor::new(u, &[shape[0]])?)?;
        }
        normed.reshape(&shape)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let w = self.normalized_weight(train)?;
        self.conv.forward_with_weight(x, &w)
    }
}

/// Border-replicating padding of the two spatial axes.
pub fn replicate_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let idx = |len: usize| -> Arc<Vec<usize>> {
        Arc::new(
            (0..len + 2 * pad)
                .map(|i| i.saturating_sub(pad).min(len - 1))
                .collect(),
        )
    };
    x.index_select(2, idx(h))?.index_select(3, idx(w))
}

/// 2×2 average pooling; odd trailing rows and columns are dropped.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    x.narrow(2, 0, 2 * h2)?
        .narrow(3, 0, 2 * w2)?
        .reshape(&[n, c, h2, 2, w2, 2])?
        .mean_axes(&[3, 5], false)
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let idx = |len: usize| Arc::new((0..2 * len).map(|i| i / 2).collect::<Vec<_>>());
    x.index_select(2, idx(h))?.index_select(3, idx(w))
}

/// Row-stochastic `[out, in]` matrix of half-pixel-centred linear interpolation.
fn interp_matrix(input: usize, output: usize) -> Tensor {
    let scale = input as f64 / output as f64;
    let mut m = vec![0.0; output * input];
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    Tensor::new(m, &[output, input]).expect("interp matrix shape")
}

/// Bilinear resize with corner alignment off, as two interpolation matmuls.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear resize to an empty size {out_h}x{out_w}"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let rw = interp_matrix(w, out_w);
    let rh = interp_matrix(h, out_h);
    let along_w = x
        .reshape(&[n * c * h, w])?
        .matmul_t(&rw, false, true)?
        .reshape(&[n * c, h, out_w])?
        .transpose(1, 2)?;
    along_w
        .reshape(&[n * c * out_w, h])?
        .matmul_t(&rh, false, true)?
        .reshape(&[n * c, out_w, out_h])?
        .transpose(1, 2)?
        .reshape(&[n, c, out_h, out_w])
}

/// Inverted dropout; the identity outside training or when `p` is 0.
pub fn dropout(x: &Tensor, p: f64, ctx: &mut Ctx) -> Result<Tensor> {
    if !ctx.train || p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask = no_grad(|| {
        Tensor::from_fn(x.shape(), |_| if ctx.rng.random::<f64>() < p { 0.0 } else { keep })
    });
    x.mul(&mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn replicate_pad_copies_borders() {
        let x = Tensor::new((0..4).map(f64::from).collect(), &[1, 1, 2, 2]).unwrap();
        let y = replicate_pad(&x, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.to_vec(),
            vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]
        );
    }

    #[test]
    fn bilinear_half_averages_pixel_pairs() {
        let x = Tensor::new((0..16).map(f64::from).collect(), &[1, 1, 4, 4]).unwrap();
        let y = bilinear_resize(&x, 2, 2).unwrap();
        // each output is the mean of a 2x2 block
        assert_eq!(y.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
        let q = bilinear_resize(&Tensor::ones(&[1, 2, 8, 8]), 2, 2).unwrap();
        assert!(q.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn spectral_normalize_identity_and_zero() {
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let mut u = vec![0.6, 0.8];
        let (n, s) = spectral_normalize(&eye, &mut u, 5).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(n.max_abs_diff(&eye).unwrap() < 1e-6);
        let zero = Tensor::zeros(&[2, 3]);
        let mut u = vec![1.0, 0.0];
        let (n, _) = spectral_normalize(&zero, &mut u, 3).unwrap();
        assert!(n.all_finite() && n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_rejects_single_pixel() {
        let s = ParamStore::new(0);
        let n = InstanceNorm2d::new(&s.root(), 2).unwrap();
        assert!(n.forward(&Tensor::ones(&[1, 2, 1, 1])).is_err());
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let s = ParamStore::new(0);
        let bn = BatchNorm2d::new(&s.root(), 1).unwrap();
        let x = Tensor::full(&[1, 1, 1, 1], 3.0);
        let y = bn.forward(&x, false).unwrap();
        assert!((y.item().unwrap() - 3.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let x = Tensor::ones(&[2, 3]);
        let mut ctx = Ctx::eval();
        assert_eq!(dropout(&x, 0.5, &mut ctx).unwrap().to_vec(), x.to_vec());
    }
}
