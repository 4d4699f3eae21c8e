use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{avg_pool2, Conv2d, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// One layer, `identity`, returning the input unchanged.
    Identity,
    /// VGG-style conv stack with frozen weights drawn from a pinned seed.
    FixedRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub kind: ExtractorKind,
    /// Output widths of the four two-conv blocks.
    pub widths: [usize; 4],
    pub layers: Vec<String>,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            kind: ExtractorKind::FixedRandom,
            widths: [16, 32, 64, 64],
            layers: vec!["relu2_2".into(), "relu3_2".into(), "relu4_2".into()],
            seed: 1234,
        }
    }
}

impl PerceptualConfig {
    pub fn tiny() -> Self {
        PerceptualConfig {
            widths: [4, 8, 8, 8],
            ..Default::default()
        }
    }

    pub fn identity() -> Self {
        PerceptualConfig {
            kind: ExtractorKind::Identity,
            layers: vec!["identity".into()],
            ..Default::default()
        }
    }
}

/// Frozen feature network exposing named layers.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    kind: ExtractorKind,
    convs: Vec<(String, Tensor, Tensor)>,
    pub layers: Vec<String>,
}

impl PerceptualExtractor {
    pub fn new(cfg: &PerceptualConfig, in_channels: usize) -> Result<Self> {
        let mut convs = Vec::new();
        if cfg.kind == ExtractorKind::FixedRandom {
            let store = ParamStore::new(cfg.seed);
            let root = store.root();
            let mut prev = in_channels;
            for (bi, &w) in cfg.widths.iter().enumerate() {
                for ci in 0..2 {
                    let name = format!("relu{}_{}", bi + 1, ci + 1);
                    let conv = Conv2d::new(&root.pp(&name), prev, w, 3, 1, 1, true)?;
                    // frozen: plain constants, never graph leaves
                    let weight = conv.weight.get().detach();
                    let bias = conv.bias.expect("bias requested").get().detach();
                    convs.push((name, weight, bias));
                    prev = w;
                }
            }
        }
        let ext = PerceptualExtractor {
            kind: cfg.kind,
            convs,
            layers: cfg.layers.clone(),
        };
        if ext.layers.is_empty() {
            return Err(config_err!("perceptual loss needs at least one layer"));
        }
        for l in &ext.layers {
            if !ext.layer_names().contains(l) {
                return Err(config_err!(
                    "unknown perceptual layer {l}; available: {}",
                    ext.layer_names().join(", ")
                ));
            }
        }
        Ok(ext)
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn layer_names(&self) -> Vec<String> {
        match self.kind {
            ExtractorKind::Identity => vec!["identity".into()],
            ExtractorKind::FixedRandom => self.convs.iter().map(|(n, _, _)| n.clone()).collect(),
        }
    }

    /// Activations of the selected layers, in `self.layers` order.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if self.kind == ExtractorKind::Identity {
            return Ok(vec![x.clone(); self.layers.len()]);
        }
        let mut found: Vec<(String, Tensor)> = Vec::new();
        let mut h = x.clone();
        let deepest = self
            .layers
            .iter()
            .filter_map(|l| self.convs.iter().position(|(n, _, _)| n == l))
            .max()
            .unwrap_or(0);
        for (i, (name, w, b)) in self.convs.iter().enumerate().take(deepest + 1) {
            if i > 0 && i % 2 == 0 {
                h = avg_pool2(&h)?;
            }
            let c = w.dim(0);
            h = h.conv2d(w, 1, 1)?.add(&b.reshape(&[1, c, 1, 1])?)?.relu()?;
            if self.layers.contains(name) {
                found.push((name.clone(), h.clone()));
            }
        }
        self.layers
            .iter()
            .map(|l| {
                found
                    .iter()
                    .find(|(n, _)| n == l)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| config_err!("layer {l} was not produced"))
            })
            .collect()
    }
}

/// Mean over layers of `Σ(φ(ref) − φ(gen))² / (W·H)`, the sum running over
/// channels and positions and the result averaged over the batch.
pub fn perceptual_loss(gen: &Tensor, reference: &Tensor, ext: &PerceptualExtractor) -> Result<Tensor> {
    let fg = ext.features(gen)?;
    let fr = ext.features(reference)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fg.iter().zip(&fr) {
        let (n, _, h, w) = a.dims4()?;
        let term = b.sub(a)?.sqr()?.sum_all()?.mul_scalar(1.0 / (n * h * w) as f64)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total
        .expect("at least one layer")
        .mul_scalar(1.0 / fg.len() as f64)
}
