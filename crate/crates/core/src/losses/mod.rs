//! Training objectives for both networks. Image arguments are `[n, c, h, w]`
//! tensors in the signed `[-1, 1]` range produced by the generator.

mod perceptual;
pub mod ssim;

pub use perceptual::{perceptual_loss, ExtractorKind, PerceptualConfig, PerceptualExtractor};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::image::signed_to_unit;
use crate::tensor::{grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_sim: f64,
    pub lambda_adv: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma_sim: 1.0,
            lambda_adv: 0.01,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_sim", self.gamma_sim),
            ("lambda_adv", self.lambda_adv),
            ("lambda_gp", self.lambda_gp),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err!("loss weight {name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: shapes differ, {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn flat_axes(t: &Tensor) -> Vec<usize> {
    (1..t.rank()).collect()
}

/// `1 − cos(gen, ref)` per sample over all non-batch axes, averaged over the
/// batch. Norms carry a `1e-8` guard so zero inputs stay finite.
pub fn cosine_loss(gen: &Tensor, reference: &Tensor) -> Result<Tensor> {
    same_shape(gen, reference, "cosine loss")?;
    let axes = flat_axes(gen);
    let dot = gen.mul(reference)?.sum_axes(&axes, false)?;
    let ng = gen.sqr()?.sum_axes(&axes, false)?.add_scalar(1e-16)?.sqrt()?;
    let nr = reference.sqr()?.sum_axes(&axes, false)?.add_scalar(1e-16)?.sqrt()?;
    dot.div(&ng.mul(&nr)?)?.neg()?.add_scalar(1.0)?.mean_all()
}

/// `1 − MS-SSIM` after shifting both inputs to the unit range.
pub fn ms_ssim_loss(gen: &Tensor, reference: &Tensor) -> Result<Tensor> {
    same_shape(gen, reference, "ms-ssim loss")?;
    ssim::ms_ssim_loss_unit(&signed_to_unit(gen)?, &signed_to_unit(reference)?)
}

/// Weighted sum of the three similarity terms; zero-weight terms are skipped.
pub fn similarity_loss(
    gen: &Tensor,
    reference: &Tensor,
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<Tensor> {
    same_shape(gen, reference, "similarity loss")?;
    let mut total = Tensor::scalar(0.0);
    if weights.alpha != 0.0 {
        total = total.add(&perceptual_loss(gen, reference, extractor)?.mul_scalar(weights.alpha)?)?;
    }
    if weights.beta != 0.0 {
        total = total.add(&cosine_loss(gen, reference)?.mul_scalar(weights.beta)?)?;
    }
    if weights.gamma_sim != 0.0 {
        total = total.add(&ms_ssim_loss(gen, reference)?.mul_scalar(weights.gamma_sim)?)?;
    }
    Ok(total)
}

/// Mean over scales of `mean((s − 1)²) / 2`.
pub fn generator_adv_loss(score_maps: &[Tensor]) -> Result<Tensor> {
    if score_maps.is_empty() {
        return Err(config_err!("adversarial loss needs at least one score map"));
    }
    let mut total = Tensor::scalar(0.0);
    for s in score_maps {
        total = total.add(&s.add_scalar(-1.0)?.sqr()?.mean_all()?)?;
    }
    total.mul_scalar(0.5 / score_maps.len() as f64)
}

pub fn generator_total_loss(
    gen: &Tensor,
    reference: &Tensor,
    score_maps: &[Tensor],
    weights: &LossWeights,
    extractor: &PerceptualExtractor,
) -> Result<Tensor> {
    let sim = similarity_loss(gen, reference, weights, extractor)?;
    if weights.lambda_adv == 0.0 {
        return Ok(sim);
    }
    sim.add(&generator_adv_loss(score_maps)?.mul_scalar(weights.lambda_adv)?)
}

/// Per-sample critic value `[n]`: the sum over scales of each map's mean.
pub fn critic_per_sample(score_maps: &[Tensor]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for s in score_maps {
        let axes = flat_axes(s);
        let m = if axes.is_empty() { s.clone() } else { s.mean_axes(&axes, false)? };
        acc = Some(match acc {
            Some(a) => a.add(&m)?,
            None => m,
        });
    }
    acc.ok_or_else(|| config_err!("critic produced no score maps"))
}

/// Batch mean of the critic value, averaged over scales.
pub fn critic_mean(score_maps: &[Tensor]) -> Result<Tensor> {
    critic_per_sample(score_maps)?
        .mean_all()?
        .mul_scalar(1.0 / score_maps.len() as f64)
}

/// `mean((‖∇D(x̂)‖ − 1)²)` on per-item interpolates of `real` and `fake`.
/// `critic` maps a batch to per-sample scores `[n]`.
pub fn gradient_penalty<R: Rng + ?Sized>(
    critic: &dyn Fn(&Tensor) -> Result<Tensor>,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    same_shape(real, fake, "gradient penalty")?;
    let n = real.dim(0);
    let mut eps_shape = vec![1; real.rank()];
    eps_shape[0] = n;
    let eps = Tensor::new((0..n).map(|_| rng.random::<f64>()).collect(), &eps_shape)?;
    let real = real.detach();
    let fake = fake.detach();
    let x_hat = fake
        .add(&real.sub(&fake)?.mul(&eps)?)?
        .detach()
        .into_var();
    let scores = critic(&x_hat)?;
    if scores.numel() != n {
        return Err(shape_err!("critic returned {:?} for a batch of {n}", scores.shape()));
    }
    let g = grad(&scores.sum_all()?, &[&x_hat], true)
        .map_err(|e| Error::Autograd(format!("gradient penalty: {e}")))?
        .remove(0);
    let sq = g.sqr()?.sum_axes(&flat_axes(&g), false)?;
    // exact zero stays zero with a zero subgradient instead of an infinite one
    let nonzero = Tensor::new(sq.data().iter().map(|&v| f64::from(v > 0.0)).collect(), sq.shape())?;
    let norm = sq.clamp_min(1e-300)?.sqrt()?.mul(&nonzero)?;
    norm.add_scalar(-1.0)?.sqr()?.mean_all()
}

#[derive(Debug, Clone)]
pub struct DiscriminatorLoss {
    pub total: Tensor,
    pub real: f64,
    pub fake: f64,
    pub penalty: f64,
}

/// `−E[D(real)] + E[D(fake)] + λ_gp · GP`. `fake` must already be detached
/// from the generator.
pub fn discriminator_loss<R: Rng + ?Sized>(
    critic: &dyn Fn(&Tensor) -> Result<Tensor>,
    real: &Tensor,
    fake: &Tensor,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<DiscriminatorLoss> {
    same_shape(real, fake, "discriminator loss")?;
    let l_real = critic(real)?.mean_all()?.neg()?;
    let l_fake = critic(fake)?.mean_all()?;
    let mut total = l_real.add(&l_fake)?;
    let mut penalty = 0.0;
    if weights.lambda_gp != 0.0 {
        let gp = gradient_penalty(critic, real, fake, rng)?;
        penalty = gp.item()?;
        total = total.add(&gp.mul_scalar(weights.lambda_gp)?)?;
    }
    Ok(DiscriminatorLoss {
        real: l_real.item()?,
        fake: l_fake.item()?,
        penalty,
        total,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn signed(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, -0.9, 0.9, &mut rng(seed))
    }

    fn val(t: Result<Tensor>) -> f64 {
        t.unwrap().item().unwrap()
    }

    fn identity() -> PerceptualExtractor {
        PerceptualExtractor::new(&PerceptualConfig::identity(), 1).unwrap()
    }

    #[test]
    fn perceptual_identity_example() {
        let r = signed(&[1, 1, 4, 4], 0);
        let g = r.add_scalar(0.1).unwrap();
        assert!((val(perceptual_loss(&g, &r, &identity())) - 0.01).abs() < 1e-12);
        assert_eq!(val(perceptual_loss(&r, &r, &identity())), 0.0);
    }

    #[test]
    fn perceptual_is_symmetric_and_rejects_unknown_layers() {
        let ext = PerceptualExtractor::new(&PerceptualConfig::tiny(), 3).unwrap();
        let (a, b) = (signed(&[2, 3, 16, 16], 1), signed(&[2, 3, 16, 16], 2));
        let ab = val(perceptual_loss(&a, &b, &ext));
        assert!(ab > 0.0);
        assert!((ab - val(perceptual_loss(&b, &a, &ext))).abs() < 1e-7);
        let bad = PerceptualConfig {
            layers: vec!["relu9_9".into()],
            ..PerceptualConfig::tiny()
        };
        assert!(PerceptualExtractor::new(&bad, 3).unwrap_err().is_validation());
    }

    #[test]
    fn cosine_examples() {
        let x = signed(&[2, 3, 4, 4], 3);
        assert!(val(cosine_loss(&x, &x)).abs() < 1e-7);
        assert!((val(cosine_loss(&x, &x.neg().unwrap())) - 2.0).abs() < 1e-7);
        let a = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        let b = Tensor::new(vec![0.0, 1.0], &[1, 2]).unwrap();
        assert!((val(cosine_loss(&a, &b)) - 1.0).abs() < 1e-12);
        let z = Tensor::zeros(&[1, 2]);
        assert!(val(cosine_loss(&z, &b)).is_finite());
    }

    #[test]
    fn ms_ssim_constant_images_match_luminance_oracle() {
        let (c1, c2) = (-0.4, 0.5);
        let x = Tensor::full(&[1, 1, 64, 64], c1);
        let y = Tensor::full(&[1, 1, 64, 64], c2);
        // constant patches: cs = 1 at every scale, so only the coarsest luminance term remains,
        // raised to its renormalized weight (64 px leaves three scales)
        let (u, v) = ((c1 + 1.0) / 2.0, (c2 + 1.0) / 2.0);
        let k = ssim::K1 * ssim::K1;
        let lum = (2.0 * u * v + k) / (u * u + v * v + k);
        let w3 = 0.3001 / (0.0448 + 0.2856 + 0.3001);
        assert!((val(ms_ssim_loss(&x, &y)) - (1.0 - lum.powf(w3))).abs() < 1e-6);
        let a = signed(&[1, 2, 64, 64], 4);
        let b = signed(&[1, 2, 64, 64], 5);
        assert!(val(ms_ssim_loss(&a, &a)).abs() < 1e-6);
        assert!((val(ms_ssim_loss(&a, &b)) - val(ms_ssim_loss(&b, &a))).abs() < 1e-6);
    }

    #[test]
    fn similarity_weight_masking() {
        let ext = identity();
        let a = signed(&[1, 1, 16, 16], 6);
        let b = signed(&[1, 1, 16, 16], 7);
        let only_p = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma_sim: 0.0,
            ..Default::default()
        };
        assert_eq!(
            val(similarity_loss(&a, &b, &only_p, &ext)),
            val(perceptual_loss(&a, &b, &ext))
        );
        assert!(val(similarity_loss(&a, &a, &LossWeights::default(), &ext)).abs() < 1e-6);
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(val(generator_adv_loss(&[Tensor::ones(&[2, 1, 3, 3])])), 0.0);
        assert_eq!(val(generator_adv_loss(&vec![Tensor::zeros(&[2, 1, 3, 3]); 3])), 0.5);
        let s = Tensor::new(vec![0.0, 1.0, 2.0], &[1, 1, 1, 3]).unwrap();
        // (1 + 0 + 1) / 3 / 2
        assert!((val(generator_adv_loss(&[s])) - 1.0 / 3.0).abs() < 1e-15);
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma_sim: 0.0,
            lambda_adv: 2.0,
            lambda_gp: 0.0,
        };
        let g = signed(&[1, 1, 8, 8], 8);
        let total = generator_total_loss(&g, &g, &[Tensor::zeros(&[1, 1, 2, 2])], &w, &identity());
        assert_eq!(val(total), 1.0);
    }

    #[test]
    fn total_loss_grows_with_each_weight() {
        let ext = identity();
        let a = signed(&[1, 1, 16, 16], 9);
        let b = signed(&[1, 1, 16, 16], 10);
        let maps = [Tensor::zeros(&[1, 1, 2, 2])];
        let base = LossWeights::default();
        let l0 = val(generator_total_loss(&a, &b, &maps, &base, &ext));
        let bumped = [
            LossWeights { alpha: 2.0, ..base },
            LossWeights { beta: 2.0, ..base },
            LossWeights { gamma_sim: 2.0, ..base },
            LossWeights { lambda_adv: 1.0, ..base },
        ];
        for w in bumped {
            assert!(val(generator_total_loss(&a, &b, &maps, &w, &ext)) > l0);
        }
    }

    #[test]
    fn penalty_on_constant_critic_is_one() {
        let critic = |x: &Tensor| -> Result<Tensor> {
            x.mul_scalar(0.0)?.sum_axes(&[1, 2, 3], false)?.add_scalar(3.0)
        };
        let (r, f) = (signed(&[3, 2, 4, 4], 11), signed(&[3, 2, 4, 4], 12));
        let gp = val(gradient_penalty(&critic, &r, &f, &mut rng(0)));
        assert!((gp - 1.0).abs() < 1e-12);
        let w = LossWeights::default();
        let d = discriminator_loss(&critic, &r, &f, &w, &mut rng(0)).unwrap();
        assert!((d.real + d.fake).abs() < 1e-12);
        assert!((d.total.item().unwrap() - 10.0).abs() < 1e-10);
    }

    #[test]
    fn penalty_errors_when_input_is_disconnected() {
        let critic = |x: &Tensor| -> Result<Tensor> { Ok(Tensor::zeros(&[x.dim(0)])) };
        let (r, f) = (signed(&[2, 1, 2, 2], 13), signed(&[2, 1, 2, 2], 14));
        assert!(gradient_penalty(&critic, &r, &f, &mut rng(0)).is_err());
    }

    #[test]
    fn discriminator_loss_arithmetic_and_antisymmetry() {
        let w = LossWeights {
            lambda_gp: 0.0,
            ..Default::default()
        };
        let r = Tensor::full(&[2, 1, 2, 2], 3.0);
        let f = Tensor::full(&[2, 1, 2, 2], 1.0);
        let critic = |x: &Tensor| x.mean_axes(&[1, 2, 3], false);
        let d = discriminator_loss(&critic, &r, &f, &w, &mut rng(0)).unwrap();
        assert_eq!(d.total.item().unwrap(), -2.0);
        let swapped = discriminator_loss(&critic, &f, &r, &w, &mut rng(0)).unwrap();
        assert_eq!(swapped.total.item().unwrap(), 2.0);
    }

    #[test]
    fn critic_reductions() {
        let a = Tensor::new(vec![1.0, 3.0, 5.0, 7.0], &[2, 1, 1, 2]).unwrap();
        let b = Tensor::new(vec![10.0, 20.0], &[2, 1, 1, 1]).unwrap();
        let ps = critic_per_sample(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ps.to_vec(), vec![12.0, 26.0]);
        assert_eq!(val(critic_mean(&[a, b])), 9.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn linear_critic_penalty_closed_form(seed in 0u64..10_000, scale in 0.05f64..3.0) {
            let w = Tensor::randn(&[1, 2, 3, 3], &mut rng(seed)).mul_scalar(scale).unwrap();
            let norm = w.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
            let critic = |x: &Tensor| x.mul(&w)?.sum_axes(&[1, 2, 3], false);
            let r = signed(&[2, 2, 3, 3], seed + 1);
            let f = signed(&[2, 2, 3, 3], seed + 2);
            let gp = val(gradient_penalty(&critic, &r, &f, &mut rng(seed)));
            prop_assert!((gp - (norm - 1.0).powi(2)).abs() < 1e-5);
        }

        #[test]
        fn losses_are_non_negative(seed in 0u64..10_000) {
            let a = signed(&[1, 2, 16, 16], seed);
            let b = signed(&[1, 2, 16, 16], seed + 7);
            prop_assert!(val(cosine_loss(&a, &b)) >= 0.0);
            prop_assert!(val(ms_ssim_loss(&a, &b)) >= 0.0);
            let ext = PerceptualExtractor::new(&PerceptualConfig::tiny(), 2).unwrap();
            prop_assert!(val(perceptual_loss(&a, &b, &ext)) >= 0.0);
        }
    }
}
