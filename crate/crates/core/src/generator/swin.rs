//! Four-stage shifted-window transformer with scaled cosine attention and a
//! continuous (log-spaced coordinate MLP) relative position bias.

use std::sync::Arc;

use super::GeneratorConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Builder, Conv2d, LayerNorm, Linear, Param};
use crate::tensor::Tensor;

/// `[b, h, w, c]` → `[b·nw, m·m, c]`, windows in row-major order.
pub fn window_partition(x: &Tensor, m: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % m != 0 || w % m != 0 {
        return Err(shape_err!("{h}x{w} map does not tile into {m}x{m} windows"));
    }
    x.reshape(&[b, h / m, m, w / m, m, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * (h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, m: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = windows.dim(2);
    windows
        .reshape(&[b, h / m, w / m, m, m, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// Cyclic shift of the two spatial axes of `[b, h, w, c]`: `out[i] = x[(i + s) mod len]`.
fn roll(x: &Tensor, s: isize) -> Result<Tensor> {
    if s == 0 {
        return Ok(x.clone());
    }
    let idx = |len: usize| -> Arc<Vec<usize>> {
        let l = len as isize;
        Arc::new((0..l).map(|i| (i + s).rem_euclid(l) as usize).collect())
    };
    let (_, h, w, _) = x.dims4()?;
    x.index_select(1, idx(h))?.index_select(2, idx(w))
}

/// `-100` between tokens that came from different regions before the shift.
fn shift_mask(h: usize, w: usize, m: usize, s: usize) -> Result<Tensor> {
    let region = |i: usize, len: usize| {
        if i < len - m {
            0
        } else if i < len - s {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / m, w / m);
    let n = m * m;
    let mut mask = vec![0.0; nh * nw * n * n];
    for wi in 0..nh {
        for wj in 0..nw {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let (r, c) = (wi * m + t / m, wj * m + t % m);
                    region(r, h) * 3 + region(c, w)
                })
                .collect();
            let base = (wi * nw + wj) * n * n;
            for a in 0..n {
                for bb in 0..n {
                    if labels[a] != labels[bb] {
                        mask[base + a * n + bb] = -100.0;
                    }
                }
            }
        }
    }
    Tensor::new(mask, &[nh * nw, n, n])
}

/// Log-spaced relative coordinates `[(2m-1)², 2]` and the `[m², m²]` lookup index.
fn relative_tables(m: usize) -> Result<(Tensor, Arc<Vec<usize>>)> {
    let span = 2 * m - 1;
    let denom = (m.max(2) - 1) as f64;
    let mut coords = Vec::with_capacity(span * span * 2);
    for dh in 0..span {
        for dw in 0..span {
            for d in [dh, dw] {
                let t = (d as f64 - (m - 1) as f64) / denom * 8.0;
                coords.push(t.signum() * (t.abs() + 1.0).log2() / 8f64.log2());
            }
        }
    }
    let n = m * m;
    let mut index = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dh = a / m + m - 1 - b / m;
            let dw = a % m + m - 1 - b % m;
            index.push(dh * span + dw);
        }
    }
    Ok((Tensor::new(coords, &[span * span, 2])?, Arc::new(index)))
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// Per-head temperature; logits are divided by `max(tau, 0.01)`.
    pub tau: Param,
    pub cpb1: Linear,
    pub cpb2: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl WindowAttention {
    pub fn new(b: &Builder, dim: usize, heads: usize, cpb_hidden: usize) -> Result<Self> {
        Ok(WindowAttention {
            qkv: Linear::new(&b.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&b.pp("proj"), dim, dim, true)?,
            tau: b.param("tau", Tensor::full(&[heads], 0.1))?,
            cpb1: Linear::new(&b.pp("cpb1"), 2, cpb_hidden, true)?,
            cpb2: Linear::new(&b.pp("cpb2"), cpb_hidden, heads, false)?,
            heads,
            dim,
        })
    }

    /// `[heads, m², m²]` bias, bounded in `(0, 16)`.
    fn position_bias(&self, m: usize) -> Result<Tensor> {
        let (coords, index) = relative_tables(m)?;
        let n = m * m;
        let table = self.cpb2.forward(&self.cpb1.forward(&coords)?.relu()?)?;
        table
            .index_select(0, index)?
            .transpose(0, 1)?
            .reshape(&[self.heads, n, n])?
            .sigmoid()?
            .mul_scalar(16.0)
    }

    /// Softmax attention weights `[bw, heads, n, n]` and values `[bw·heads, n, d]`.
    /// `mask` is `[nw, n, n]` when windows were shifted.
    pub fn weights(&self, x: &Tensor, m: usize, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (bw, n, c) = match x.shape() {
            &[a, b, c] => (a, b, c),
            s => return Err(shape_err!("window attention expects [windows, tokens, dim], got {s:?}")),
        };
        let h = self.heads;
        let d = c / h;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape(&[bw, n, 3, h, d])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[bw * h, n, d]);
        let unit = |t: Tensor| -> Result<Tensor> {
            let norm = t.sqr()?.sum_axes(&[2], true)?.add_scalar(1e-12)?.sqrt()?;
            t.div(&norm)
        };
        let (q, k, v) = (unit(part(0)?)?, unit(part(1)?)?, part(2)?);
        let temperature = self.tau.get().clamp_min(0.01)?.reshape(&[1, h, 1, 1])?;
        let mut logits = q
            .matmul_t(&k, false, true)?
            .reshape(&[bw, h, n, n])?
            .div(&temperature)?
            .add(&self.position_bias(m)?.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0);
            logits = logits
                .reshape(&[bw / nw, nw, h, n, n])?
                .add(&mask.reshape(&[1, nw, 1, n, n])?)?
                .reshape(&[bw, h, n, n])?;
        }
        Ok((logits.softmax_last()?, v))
    }

    pub fn forward(&self, x: &Tensor, m: usize, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bw, n, c) = (x.dim(0), x.dim(1), x.dim(2));
        let h = self.heads;
        let (attn, v) = self.weights(x, m, mask)?;
        let out = attn
            .reshape(&[bw * h, n, n])?
            .matmul(&v)?
            .reshape(&[bw, h, n, c / h])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bw, n, c])?;
        self.proj.forward(&out)
    }
}

/// Residual-post-norm transformer block.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub attn: WindowAttention,
    pub norm1: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm2: LayerNorm,
    pub window: usize,
    pub shifted: bool,
}

impl SwinBlock {
    fn new(b: &Builder, dim: usize, heads: usize, cfg: &GeneratorConfig, shifted: bool) -> Result<Self> {
        let hidden = ((dim as f64 * cfg.mlp_ratio).round() as usize).max(1);
        Ok(SwinBlock {
            attn: WindowAttention::new(&b.pp("attn"), dim, heads, cfg.cpb_hidden)?,
            norm1: LayerNorm::new(&b.pp("norm1"), dim)?,
            fc1: Linear::new(&b.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&b.pp("fc2"), hidden, dim, true)?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim)?,
            window: cfg.window_size,
            shifted,
        })
    }

    /// Effective window and shift for an `h × w` map.
    pub fn geometry(&self, h: usize, w: usize) -> (usize, usize) {
        let res = h.min(w);
        if res <= self.window {
            (res, 0)
        } else {
            (self.window, if self.shifted { self.window / 2 } else { 0 })
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let (m, s) = self.geometry(h, w);
        let shifted = roll(x, s as isize)?;
        let windows = window_partition(&shifted, m)?;
        let mask = if s > 0 { Some(shift_mask(h, w, m, s)?) } else { None };
        let attended = self.attn.forward(&windows, m, mask.as_ref())?;
        let merged = roll(&window_reverse(&attended, m, b, h, w)?, -(s as isize))?;
        let x = x.add(&self.norm1.forward(&merged)?)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&x)?.gelu()?)?;
        x.add(&self.norm2.forward(&mlp)?)
    }
}

/// 2×2 neighbourhood concatenation, linear reduction `4c → 2c`, layer norm.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub reduction: Linear,
    pub norm: LayerNorm,
}

impl PatchMerging {
    fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(PatchMerging {
            reduction: Linear::new(&b.pp("reduction"), 4 * dim, 2 * dim, false)?,
            norm: LayerNorm::new(&b.pp("norm"), 2 * dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let grouped = x
            .reshape(&[b, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 4, 2, 5])?
            .reshape(&[b, h / 2, w / 2, 4 * c])?;
        self.norm.forward(&self.reduction.forward(&grouped)?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinBackbone {
    pub embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerging>,
    pub out_norms: Vec<LayerNorm>,
    pub unit: usize,
}

impl SwinBackbone {
    pub fn new(b: &Builder, in_channels: usize, cfg: &GeneratorConfig) -> Result<Self> {
        let dims = cfg.stage_dims();
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        let mut out_norms = Vec::new();
        for i in 0..4 {
            let sb = b.pp(&format!("stage{i}"));
            let blocks = (0..cfg.swin_depths[i])
                .map(|j| SwinBlock::new(&sb.pp(&format!("block{j}")), dims[i], cfg.swin_heads[i], cfg, j % 2 == 1))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            out_norms.push(LayerNorm::new(&sb.pp("out_norm"), dims[i])?);
            if i < 3 {
                merges.push(PatchMerging::new(&sb.pp("merge"), dims[i])?);
            }
        }
        Ok(SwinBackbone {
            embed: Conv2d::new(&b.pp("embed"), in_channels, dims[0], 1, 1, 0, true)?,
            embed_norm: LayerNorm::new(&b.pp("embed_norm"), dims[0])?,
            stages,
            merges,
            out_norms,
            unit: cfg.window_size * 8,
        })
    }

    /// Feature maps `[n, cᵢ, h/2ⁱ, w/2ⁱ]` for `i = 0..4`.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        if h % self.unit != 0 || w % self.unit != 0 {
            return Err(shape_err!(
                "backbone input {h}x{w} is not divisible by window_size x 8 = {}",
                self.unit
            ));
        }
        let mut t = self
            .embed_norm
            .forward(&self.embed.forward(x)?.permute(&[0, 2, 3, 1])?)?;
        let mut feats = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                t = blk.forward(&t)?;
            }
            feats.push(self.out_norms[i].forward(&t)?.permute(&[0, 3, 1, 2])?);
            if i < 3 {
                t = self.merges[i].forward(&t)?;
            }
        }
        Ok(feats)
    }
}
