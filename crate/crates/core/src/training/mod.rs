//! Adversarial training: alternating critic and generator updates, validation,
//! checkpoints, full runs and the ablation harness.

mod checkpoint;
mod harness;
mod optim;
mod run;

pub use checkpoint::{load_checkpoint, load_generator, save_checkpoint, CheckpointHeader, CHECKPOINT_BLOB, CHECKPOINT_HEADER};
pub use harness::{run_ablation, structural_check, AblationRow, AblationTable, ABLATION_TABLE_FILE};
pub use optim::{Adam, ReduceLrOnPlateau};
pub use run::{
    latest_checkpoint, read_history, run_training, EpochRecord, HistoryRecord, RunOptions, StepRecord, TrainOutcome,
    HISTORY_FILE, SNAPSHOT_FILE,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::AblationSpec;
use crate::config::RunConfig;
use crate::data::{denormalize, Batch, Dataset, Raster};
use crate::discriminator::{stack_inputs, Discriminator};
use crate::error::{config_err, Error, Result};
use crate::generator::Generator;
use crate::image::{ImageTensor, ValueRange};
use crate::losses::{
    critic_per_sample, discriminator_loss, generator_adv_loss, generator_total_loss, similarity_loss,
    PerceptualExtractor,
};
use crate::metrics::{report_from_pairs, FeatureEmbedder, MetricReport};
use crate::nn::Ctx;
use crate::tensor::{grad, no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorMetric {
    ValPsnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Critic learning rate; `lr` when unset.
    pub d_lr: Option<f64>,
    pub betas: [f64; 2],
    pub d_weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub monitor_metric: MonitorMetric,
    pub seed: u64,
    pub shuffle: bool,
    pub checkpoint_every: usize,
    /// Caps optimizer steps per epoch; all batches when unset.
    pub max_steps_per_epoch: Option<usize>,
    pub ablation: AblationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 0.001,
            d_lr: None,
            betas: [0.9, 0.999],
            d_weight_decay: 1e-5,
            plateau_patience: 10,
            plateau_factor: 0.5,
            monitor_metric: MonitorMetric::ValPsnr,
            seed: 0,
            shuffle: true,
            checkpoint_every: 1,
            max_steps_per_epoch: None,
            ablation: AblationSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(config_err!("train.epochs, train.batch_size and train.checkpoint_every must be positive"));
        }
        if self.max_steps_per_epoch == Some(0) {
            return Err(config_err!("train.max_steps_per_epoch must be positive when set"));
        }
        for (name, v) in [("lr", Some(self.lr)), ("d_lr", self.d_lr), ("d_weight_decay", Some(self.d_weight_decay))] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(config_err!("train.{name} must be finite and non-negative, got {v}"));
                }
            }
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(config_err!("train.betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(config_err!("train.plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return Err(config_err!("train.plateau_patience must be positive"));
        }
        Ok(())
    }

    pub fn critic_lr(&self) -> f64 {
        self.d_lr.unwrap_or(self.lr)
    }

    pub fn generator_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
    }

    pub fn critic_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(2)
    }

    pub fn stream_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(3)
    }

    pub fn shuffle_seed(&self, epoch: usize) -> Option<u64> {
        self.shuffle
            .then(|| self.seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(epoch as u64))
    }
}

/// Scalar loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub d_total: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub gp: f64,
    pub g_total: f64,
    pub g_sim: f64,
    pub g_adv: f64,
}

impl StepLosses {
    fn all_finite(&self) -> bool {
        [self.d_total, self.d_real, self.d_fake, self.gp, self.g_total, self.g_sim, self.g_adv]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn batch_hash(b: &Batch) -> String {
    let mut h = Sha256::new();
    for t in [&b.s1_t1, &b.s1_t2, &b.s2_t1, &b.s2_t2] {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Models, optimizers, scheduler and the RNG stream behind dropout and the
/// gradient-penalty interpolation.
pub struct Trainer {
    pub cfg: RunConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub scheduler: ReduceLrOnPlateau,
    pub extractor: PerceptualExtractor,
    pub rng: ChaCha8Rng,
    pub global_step: u64,
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.train;
        Ok(Trainer {
            cfg: cfg.clone(),
            generator: Generator::new(&cfg.generator, &t.ablation, t.generator_seed())?,
            discriminator: Discriminator::new(&cfg.discriminator, &cfg.generator, &t.ablation, t.critic_seed())?,
            g_opt: Adam::new(t.lr, t.betas, 0.0),
            d_opt: Adam::new(t.critic_lr(), t.betas, t.d_weight_decay),
            scheduler: ReduceLrOnPlateau::new(t.plateau_patience, t.plateau_factor),
            extractor: PerceptualExtractor::new(&cfg.perceptual, cfg.generator.opt_channels)?,
            rng: ChaCha8Rng::seed_from_u64(t.stream_seed()),
            global_step: 0,
            epoch: 0,
            best_metric: None,
            best_epoch: None,
        })
    }

    fn critic_fn<'a>(&'a self) -> impl Fn(&Tensor) -> Result<Tensor> + 'a {
        move |stack: &Tensor| critic_per_sample(&self.discriminator.forward_stack(stack, true)?)
    }

    /// One critic update (with gradient penalty) on the detached prediction,
    /// then one generator update scored by the freshly updated critic.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let (h, w) = (batch.s2_t2.dim(2), batch.s2_t2.dim(3));
        self.cfg.generator.validate_tile(h, w)?;
        self.cfg.discriminator.validate_tile(h, w)?;
        let weights = self.cfg.losses;
        let mut ctx = Ctx::train(self.rng.clone());
        let fake = self.generator.forward(&batch.s1_t1, &batch.s1_t2, &batch.s2_t1, &mut ctx)?;
        self.rng = ctx.rng;

        let real_stack = stack_inputs(&batch.s2_t2, &batch.s1_t1, &batch.s1_t2, &batch.s2_t1)?;
        let fake_stack = stack_inputs(&fake.detach(), &batch.s1_t1, &batch.s1_t2, &batch.s2_t1)?;
        let mut gp_rng = self.rng.clone();
        let d = {
            let critic = self.critic_fn();
            discriminator_loss(&critic, &real_stack, &fake_stack, &weights, &mut gp_rng)?
        };
        self.rng = gp_rng;
        let d_total = d.total.item()?;

        let d_params = self.discriminator.store().trainable();
        let d_leaves: Vec<Tensor> = d_params.iter().map(|p| p.get()).collect();
        let d_grads = grad(&d.total, &d_leaves.iter().collect::<Vec<_>>(), false)?;
        self.d_opt.step(&d_params, &d_grads)?;

        let scores = self
            .discriminator
            .forward(&fake, &batch.s1_t1, &batch.s1_t2, &batch.s2_t1, true)?;
        let g_total = generator_total_loss(&fake, &batch.s2_t2, &scores, &weights, &self.extractor)?;
        let (g_sim, g_adv) = no_grad(|| -> Result<(f64, f64)> {
            Ok((
                similarity_loss(&fake, &batch.s2_t2, &weights, &self.extractor)?.item()?,
                generator_adv_loss(&scores)?.item()?,
            ))
        })?;
        let losses = StepLosses {
            d_total,
            d_real: d.real,
            d_fake: d.fake,
            gp: d.penalty,
            g_total: g_total.item()?,
            g_sim,
            g_adv,
        };
        if !losses.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}; inputs sha256 {}; components {}",
                self.global_step + 1,
                batch_hash(batch),
                serde_json::to_string(&losses)?
            )));
        }

        let g_params = self.generator.store().trainable();
        let g_leaves: Vec<Tensor> = g_params.iter().map(|p| p.get()).collect();
        let g_grads = grad(&g_total, &g_leaves.iter().collect::<Vec<_>>(), false)?;
        self.g_opt.step(&g_params, &g_grads)?;
        self.global_step += 1;
        Ok(losses)
    }

    /// Updates the generator rate from the epoch's monitor value.
    pub fn end_epoch(&mut self, metric: f64) {
        self.epoch += 1;
        self.g_opt.lr = self.scheduler.step(metric, self.g_opt.lr);
        if self.best_metric.is_none_or(|b| metric > b) {
            self.best_metric = Some(metric);
            self.best_epoch = Some(self.epoch);
        }
    }
}

/// Evaluation-mode predictions for every tile of `data`, scored against the
/// references.
pub fn validate(
    generator: &Generator,
    data: &Dataset,
    embedder: &FeatureEmbedder,
    batch_size: usize,
    model_name: &str,
) -> Result<MetricReport> {
    let mut pairs = Vec::with_capacity(data.len());
    for batch in data.batches(batch_size, None)? {
        let batch = batch?;
        let pred = no_grad(|| generator.forward(&batch.s1_t1, &batch.s1_t2, &batch.s2_t1, &mut Ctx::eval()))?;
        let pred = ImageTensor::new(pred, ValueRange::Signed)?.to_range(ValueRange::Unit)?;
        let reference = ImageTensor::new(batch.s2_t2.clone(), ValueRange::Signed)?.to_range(ValueRange::Unit)?;
        for (i, id) in batch.tile_ids.iter().enumerate() {
            let pick = |t: &ImageTensor| ImageTensor::new(t.tensor().narrow(0, i, 1)?, ValueRange::Unit);
            pairs.push((id.clone(), pick(&pred)?, pick(&reference)?));
        }
    }
    report_from_pairs(model_name, &pairs, embedder)
}

/// Evaluation-mode predictions for every tile, mapped back to reflectance with
/// the dataset's optical normalization; in dataset order.
pub fn synthesize_dataset(generator: &Generator, data: &Dataset, batch_size: usize) -> Result<Vec<(String, Raster)>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in data.batches(batch_size, None)? {
        let batch = batch?;
        let pred = no_grad(|| generator.forward(&batch.s1_t1, &batch.s1_t2, &batch.s2_t1, &mut Ctx::eval()))?;
        for (i, id) in batch.tile_ids.iter().enumerate() {
            let signed = Raster::from_tensor(&pred.narrow(0, i, 1)?)?;
            out.push((id.clone(), denormalize(&signed, &data.optical_norm)?));
        }
    }
    Ok(out)
}

/// Parameter counts of the trainable scalars per network.
pub fn parameter_counts(cfg: &RunConfig, ablation: &AblationSpec) -> Result<BTreeMap<&'static str, usize>> {
    let g = Generator::new(&cfg.generator, ablation, cfg.train.generator_seed())?;
    let d = Discriminator::new(&cfg.discriminator, &cfg.generator, ablation, cfg.train.critic_seed())?;
    Ok(BTreeMap::from([
        ("generator", g.store().num_trainable()),
        ("discriminator", d.store().num_trainable()),
    ]))
}
