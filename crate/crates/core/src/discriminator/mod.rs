//! Conditional critic over the stack (candidate, S1_T1, S1_T2, S2_T1): three
//! spectrally normalized patch critics at full, half and quarter resolution.

use serde::{Deserialize, Serialize};

pub use crate::nn::spectral_normalize;

use crate::ablation::AblationSpec;
use crate::error::{config_err, shape_err, Result};
use crate::generator::GeneratorConfig;
use crate::nn::{
    bilinear_resize, BatchNorm2d, Builder, ChannelAttention, InstanceNorm2d, ParamStore,
    SnConv2d, SpatialAttention,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticNorm {
    Batch,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Stacked input channels; must equal `2·opt + 2·sar` of the generator.
    pub in_channels: usize,
    /// Widths of the stride-2 layers of the full-resolution critic. Coarser
    /// critics use half and a quarter of these (at least 1).
    pub widths: Vec<usize>,
    pub n_scales: usize,
    pub spectral_norm_iters: usize,
    pub norm: CriticNorm,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 10,
            widths: vec![64, 128, 256, 512],
            n_scales: 3,
            spectral_norm_iters: 1,
            norm: CriticNorm::Batch,
        }
    }
}

impl DiscriminatorConfig {
    pub fn tiny() -> Self {
        DiscriminatorConfig {
            widths: vec![8, 16, 16, 32],
            ..Default::default()
        }
    }

    pub fn validate(&self, gen: &GeneratorConfig) -> Result<()> {
        if self.n_scales != 3 {
            return Err(config_err!("discriminator.n_scales must be 3, got {}", self.n_scales));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(config_err!("discriminator.widths must be non-empty and positive"));
        }
        if self.spectral_norm_iters == 0 {
            return Err(config_err!("discriminator.spectral_norm_iters must be at least 1"));
        }
        let expect = 2 * gen.opt_channels + 2 * gen.sar_channels;
        if self.in_channels != expect {
            return Err(config_err!(
                "discriminator.in_channels is {} but the generator stack has {expect}",
                self.in_channels
            ));
        }
        Ok(())
    }

    /// Smallest tile side every critic can reduce to at least one patch.
    pub fn min_tile(&self) -> usize {
        (1usize << (self.n_scales - 1)) * (1usize << self.widths.len())
    }

    pub fn validate_tile(&self, h: usize, w: usize) -> Result<()> {
        let m = self.min_tile();
        if h < m || w < m {
            return Err(config_err!("critic pyramid needs tiles of at least {m}x{m}, got {h}x{w}"));
        }
        Ok(())
    }
}

/// Patch scores, one `[n, 1, h, w]` map per critic.
pub type ScoreMaps = Vec<Tensor>;

#[derive(Debug, Clone)]
enum Norm {
    Batch(BatchNorm2d),
    Instance(InstanceNorm2d),
}

impl Norm {
    fn new(b: &Builder, kind: CriticNorm, c: usize) -> Result<Self> {
        Ok(match kind {
            CriticNorm::Batch => Norm::Batch(BatchNorm2d::new(b, c)?),
            CriticNorm::Instance => Norm::Instance(InstanceNorm2d::new(b, c)?),
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Norm::Batch(n) => n.forward(x, train),
            Norm::Instance(n) => n.forward(x),
        }
    }
}

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.relu()?.sub(&x.neg()?.relu()?.mul_scalar(slope)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flavor {
    /// Spectral norm, Mish, channel and spatial attention.
    Attentive,
    /// Plain patch critic: spectral norm, leaky ReLU, no attention.
    Patch,
}

/// Strided conv pyramid with a 1-channel 3×3 head and no output squashing.
#[derive(Debug, Clone)]
pub struct SubDiscriminator {
    convs: Vec<SnConv2d>,
    norms: Vec<Option<Norm>>,
    channel_att: Option<ChannelAttention>,
    spatial_att: Option<SpatialAttention>,
    head: SnConv2d,
    flavor: Flavor,
    in_channels: usize,
}

impl SubDiscriminator {
    fn new(b: &Builder, in_channels: usize, widths: &[usize], cfg: &DiscriminatorConfig, flavor: Flavor) -> Result<Self> {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let lb = b.pp(&format!("layer{i}"));
            convs.push(SnConv2d::new(&lb.pp("conv"), prev, w, 4, 2, 1, cfg.spectral_norm_iters)?);
            norms.push(if i == 0 { None } else { Some(Norm::new(&lb.pp("norm"), cfg.norm, w)?) });
            prev = w;
        }
        let attentive = flavor == Flavor::Attentive;
        let channel_att = if attentive && widths.len() >= 2 {
            Some(ChannelAttention::new(&b.pp("ca"), widths[1], 8)?)
        } else {
            None
        };
        let spatial_att = if attentive && widths.len() >= 3 {
            Some(SpatialAttention::new(&b.pp("sa"))?)
        } else {
            None
        };
        Ok(SubDiscriminator {
            convs,
            norms,
            channel_att,
            spatial_att,
            head: SnConv2d::new(&b.pp("head"), prev, 1, 3, 1, 1, cfg.spectral_norm_iters)?,
            flavor,
            in_channels,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(config_err!(
                "critic expects {} stacked channels, got {c}",
                self.in_channels
            ));
        }
        let mut h = x.clone();
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = conv.forward(&h, train)?;
            if let Some(n) = norm {
                h = n.forward(&h, train)?;
            }
            h = match self.flavor {
                Flavor::Attentive => h.mish()?,
                Flavor::Patch => leaky_relu(&h, 0.2)?,
            };
            if i == 1 {
                if let Some(a) = &self.channel_att {
                    h = a.forward(&h)?;
                }
            }
            if i == 2 {
                if let Some(a) = &self.spatial_att {
                    h = a.forward(&h)?;
                }
            }
        }
        self.head.forward(&h, train)
    }
}

/// Channel-stacks the candidate with its conditioning in the fixed order
/// (candidate, S1_T1, S1_T2, S2_T1).
pub fn stack_inputs(candidate: &Tensor, s1_t1: &Tensor, s1_t2: &Tensor, s2_t1: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = candidate.dims4()?;
    for (name, t) in [("s1_t1", s1_t1), ("s1_t2", s1_t2), ("s2_t1", s2_t1)] {
        let (n2, _, h2, w2) = t.dims4()?;
        if (n2, h2, w2) != (n, h, w) {
            return Err(shape_err!(
                "{name} is {n2}x{h2}x{w2}, candidate is {n}x{h}x{w}"
            ));
        }
    }
    Tensor::cat(&[candidate, s1_t1, s1_t2, s2_t1], 1)
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    store: ParamStore,
    critics: Vec<SubDiscriminator>,
    multiscale: bool,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, gen: &GeneratorConfig, ablation: &AblationSpec, seed: u64) -> Result<Self> {
        cfg.validate(gen)?;
        let store = ParamStore::new(seed);
        let root = store.root();
        let critics = if ablation.alt_discriminator {
            vec![SubDiscriminator::new(&root.pp("patch"), cfg.in_channels, &cfg.widths, cfg, Flavor::Patch)?]
        } else {
            (0..cfg.n_scales)
                .map(|s| {
                    let widths: Vec<usize> = cfg.widths.iter().map(|&w| (w >> s).max(1)).collect();
                    SubDiscriminator::new(&root.pp(&format!("d{}", s + 1)), cfg.in_channels, &widths, cfg, Flavor::Attentive)
                })
                .collect::<Result<_>>()?
        };
        Ok(Discriminator {
            cfg: cfg.clone(),
            store,
            critics,
            multiscale: !ablation.alt_discriminator,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn n_critics(&self) -> usize {
        self.critics.len()
    }

    /// Inputs seen by each critic: the stack itself, then bilinear 1/2 and 1/4.
    pub fn scale_inputs(&self, stack: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = stack.dims4()?;
        if !self.multiscale {
            return Ok(vec![stack.clone()]);
        }
        (0..self.critics.len())
            .map(|s| {
                let f = 1usize << s;
                if h % f != 0 || w % f != 0 || h < f || w < f {
                    return Err(shape_err!("{h}x{w} stack cannot be reduced by {f}"));
                }
                bilinear_resize(stack, h / f, w / f)
            })
            .collect()
    }

    pub fn forward_stack(&self, stack: &Tensor, train: bool) -> Result<ScoreMaps> {
        self.scale_inputs(stack)?
            .iter()
            .zip(&self.critics)
            .map(|(x, d)| d.forward(x, train))
            .collect()
    }

    pub fn forward(
        &self,
        candidate: &Tensor,
        s1_t1: &Tensor,
        s1_t2: &Tensor,
        s2_t1: &Tensor,
        train: bool,
    ) -> Result<ScoreMaps> {
        self.forward_stack(&stack_inputs(candidate, s1_t1, s1_t2, s2_t1)?, train)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::no_grad;

    fn stack(n: usize, size: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, 10, size, size], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn tiny(ablation: &AblationSpec) -> Discriminator {
        Discriminator::new(&DiscriminatorConfig::tiny(), &GeneratorConfig::tiny(), ablation, 3).unwrap()
    }

    #[test]
    fn score_maps_shrink_per_scale() {
        let d = tiny(&AblationSpec::default());
        let maps = no_grad(|| d.forward_stack(&stack(2, 64, 1), true)).unwrap();
        let sizes: Vec<_> = maps.iter().map(|m| m.shape().to_vec()).collect();
        assert_eq!(sizes, vec![vec![2, 1, 4, 4], vec![2, 1, 2, 2], vec![2, 1, 1, 1]]);
    }

    #[test]
    fn eval_accepts_single_item_and_is_repeatable() {
        let d = tiny(&AblationSpec::default());
        let z = Tensor::zeros(&[1, 10, 64, 64]);
        let a = d.forward_stack(&z, false).unwrap();
        let b = d.forward_stack(&z, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn concatenation_order_matters() {
        let d = tiny(&AblationSpec::default());
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let c = Tensor::randn(&[1, 3, 64, 64], &mut r);
        let s1 = Tensor::randn(&[1, 2, 64, 64], &mut r);
        let s2 = Tensor::randn(&[1, 2, 64, 64], &mut r);
        let o = Tensor::randn(&[1, 3, 64, 64], &mut r);
        let a = d.forward(&c, &s1, &s2, &o, false).unwrap();
        let b = d.forward(&o, &s1, &s2, &c, false).unwrap();
        assert_ne!(a[0].to_vec(), b[0].to_vec());
        assert!(d.forward(&c, &s1, &s2, &Tensor::zeros(&[1, 3, 32, 32]), false).is_err());
    }

    #[test]
    fn coarse_inputs_come_from_the_shared_resize() {
        let d = tiny(&AblationSpec::default());
        let s = stack(1, 64, 2);
        let inputs = d.scale_inputs(&s).unwrap();
        assert_eq!(inputs[1].to_vec(), bilinear_resize(&s, 32, 32).unwrap().to_vec());
        assert_eq!(inputs[2].to_vec(), bilinear_resize(&s, 16, 16).unwrap().to_vec());
    }

    #[test]
    fn alt_critic_is_single_scale_and_smaller() {
        let full = tiny(&AblationSpec::default());
        let alt = tiny(&AblationSpec {
            alt_discriminator: true,
            ..Default::default()
        });
        assert_eq!(alt.n_critics(), 1);
        assert!(alt.store().num_trainable() < full.store().num_trainable());
        assert!(alt.store().all().iter().all(|p| !p.name().contains(".ca.") && !p.name().contains(".sa.")));
    }

    #[test]
    fn in_channels_must_match_generator() {
        let cfg = DiscriminatorConfig {
            in_channels: 9,
            ..DiscriminatorConfig::tiny()
        };
        assert!(Discriminator::new(&cfg, &GeneratorConfig::tiny(), &AblationSpec::default(), 0).is_err());
    }
}
