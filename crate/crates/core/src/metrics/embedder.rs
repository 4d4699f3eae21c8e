use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    PretrainedInceptionStyle,
    FixedRandom,
}

impl EmbedderKind {
    pub fn tag(self) -> &'static str {
        match self {
            EmbedderKind::PretrainedInceptionStyle => "pretrained-inception-style",
            EmbedderKind::FixedRandom => "fixed-random",
        }
    }
}

/// Frozen conv stack mapping `[n, c, h, w]` images to fixed-length vectors
/// (per-channel mean and standard deviation of the last activation).
#[derive(Debug, Clone)]
pub struct FeatureEmbedder {
    kind: EmbedderKind,
    in_channels: usize,
    layers: Vec<(Tensor, Tensor)>,
}

pub const EMBEDDER_SEED: u64 = 20_210_720;

impl FeatureEmbedder {
    pub fn fixed_random(in_channels: usize, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed);
        let root = store.root();
        let mut layers = Vec::new();
        let mut prev = in_channels;
        for (i, &w) in [16usize, 32, 32].iter().enumerate() {
            let conv = Conv2d::new(&root.pp(&format!("embed{i}")), prev, w, 3, 2, 1, true)?;
            let bias = conv.bias.expect("bias requested").get().detach();
            layers.push((conv.weight.get().detach(), bias));
            prev = w;
        }
        Ok(FeatureEmbedder {
            kind: EmbedderKind::FixedRandom,
            in_channels,
            layers,
        })
    }

    /// Default embedder for three-band optical tiles.
    pub fn optical() -> Self {
        FeatureEmbedder::fixed_random(3, EMBEDDER_SEED).expect("static embedder config")
    }

    pub fn kind(&self) -> EmbedderKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        2 * self.layers.last().map_or(0, |(w, _)| w.dim(0))
    }

    pub fn embed(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (n, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(config_err!("embedder expects {} channels, got {c}", self.in_channels));
        }
        no_grad(|| {
            let mut h = x.clone();
            for (w, b) in &self.layers {
                let co = w.dim(0);
                h = h.conv2d(w, 2, 1)?.add(&b.reshape(&[1, co, 1, 1])?)?.relu()?;
            }
            let (_, co, hh, ww) = h.dims4()?;
            let mean = h.mean_axes(&[2, 3], false)?;
            let var = h.sub(&mean.reshape(&[n, co, 1, 1])?)?.sqr()?.mean_axes(&[2, 3], false)?;
            let std = var.sqrt()?;
            debug_assert!(hh * ww > 0);
            Ok((0..n)
                .map(|i| {
                    let mut f = mean.data()[i * co..(i + 1) * co].to_vec();
                    f.extend_from_slice(&std.data()[i * co..(i + 1) * co]);
                    f
                })
                .collect())
        })
    }
}
