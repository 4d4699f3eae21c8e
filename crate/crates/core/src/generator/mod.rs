//! The synthesis network: two convolutional input branches, fusion attention,
//! a windowed transformer backbone and an attention-gated decoder.

mod blocks;
mod config;
mod decoder;
mod fusion;
pub mod swin;

pub use blocks::{ConvMishBlock, DownUpBlock, ExtendedConvBlock, MiniConvMish};
pub use config::GeneratorConfig;
pub use decoder::Decoder;
pub use fusion::{FusionAttention, Projections};
pub use swin::{window_partition, window_reverse, SwinBackbone};

use crate::ablation::AblationSpec;
use crate::error::{config_err, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::nn::{Builder, Ctx, ParamStore};
use crate::tensor::Tensor;

/// Elementwise `x · tanh(softplus(x))`.
pub fn mish(x: &Tensor) -> Result<Tensor> {
    x.mish()
}

#[derive(Debug, Clone)]
enum Fuser {
    DownUp(DownUpBlock),
    Plain(MiniConvMish),
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub ablation: AblationSpec,
    store: ParamStore,
    a_in: MiniConvMish,
    a_block: ConvMishBlock,
    a_fuse: Fuser,
    b_in: MiniConvMish,
    b_block: ConvMishBlock,
    pub fusion: Option<FusionAttention>,
    pub backbone: SwinBackbone,
    pub decoder: Decoder,
}

/// Named intermediate shapes of one forward pass.
pub type ShapeTrace = Vec<(&'static str, Vec<usize>)>;

impl Generator {
    pub fn new(cfg: &GeneratorConfig, ablation: &AblationSpec, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed);
        let root = store.root();
        Self::build(&root, cfg, ablation, store.clone())
    }

    fn build(b: &Builder, cfg: &GeneratorConfig, ablation: &AblationSpec, store: ParamStore) -> Result<Self> {
        let w = cfg.base_width;
        let a_fuse = if ablation.no_downup {
            Fuser::Plain(MiniConvMish::new(&b.pp("a_fuse"), w, w)?)
        } else {
            Fuser::DownUp(DownUpBlock::new(&b.pp("a_downup"), w, w)?)
        };
        let fusion = if ablation.no_fusionatt {
            None
        } else {
            Some(FusionAttention::new(&b.pp("fusion"), w, cfg.qk(), cfg.gamma_init)?)
        };
        Ok(Generator {
            cfg: cfg.clone(),
            ablation: *ablation,
            a_in: MiniConvMish::new(&b.pp("a_in"), cfg.opt_channels + cfg.sar_channels, w)?,
            a_block: ConvMishBlock::new(&b.pp("a_block"), w, w)?,
            a_fuse,
            b_in: MiniConvMish::new(&b.pp("b_in"), cfg.sar_channels, w)?,
            b_block: ConvMishBlock::new(&b.pp("b_block"), w, w)?,
            fusion,
            backbone: SwinBackbone::new(&b.pp("backbone"), 2 * w, cfg)?,
            decoder: Decoder::new(&b.pp("decoder"), cfg, ablation)?,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn check_inputs(&self, s1_t1: &Tensor, s1_t2: &Tensor, s2_t1: &Tensor) -> Result<()> {
        let expect = [
            ("s1_t1", s1_t1, self.cfg.sar_channels),
            ("s1_t2", s1_t2, self.cfg.sar_channels),
            ("s2_t1", s2_t1, self.cfg.opt_channels),
        ];
        let (n0, _, h0, w0) = s1_t1.dims4()?;
        for (name, t, channels) in expect {
            let (n, c, h, w) = t
                .dims4()
                .map_err(|_| config_err!("{name} must be [batch, channels, height, width], got {:?}", t.shape()))?;
            if c != channels {
                return Err(config_err!("{name} has {c} channels, expected {channels}"));
            }
            if (n, h, w) != (n0, h0, w0) {
                return Err(config_err!(
                    "{name} is {n}x{h}x{w} but s1_t1 is {n0}x{h0}x{w0}"
                ));
            }
        }
        self.cfg.validate_tile(h0, w0)
    }

    fn run(
        &self,
        s1_t1: &Tensor,
        s1_t2: &Tensor,
        s2_t1: &Tensor,
        ctx: &mut Ctx,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Tensor> {
        self.check_inputs(s1_t1, s1_t2, s2_t1)?;
        let mut note = |name: &'static str, t: &Tensor| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((name, t.shape().to_vec()));
            }
        };
        let a = self.a_in.forward(&Tensor::cat(&[s2_t1, s1_t1], 1)?)?;
        note("a_in", &a);
        let a = self.a_block.forward(&a)?;
        note("a_block", &a);
        let a = match &self.a_fuse {
            Fuser::DownUp(blk) => blk.forward(&a)?,
            Fuser::Plain(blk) => blk.forward(&a)?,
        };
        note("a_fuse", &a);
        let bb = self.b_in.forward(s1_t2)?;
        note("b_in", &bb);
        let bb = self.b_block.forward(&bb)?;
        note("b_block", &bb);
        let (a, bb) = match &self.fusion {
            Some(f) => f.forward(&a, &bb)?,
            None => (a, bb),
        };
        let joint = Tensor::cat(&[&a, &bb], 1)?;
        note("fusion", &joint);
        let feats = self.backbone.forward(&joint)?;
        for (name, f) in ["stage0", "stage1", "stage2", "stage3"].into_iter().zip(&feats) {
            note(name, f);
        }
        let out = self.decoder.forward(&feats, ctx)?;
        note("output", &out);
        Ok(out)
    }

    /// Signed-range prediction `[n, opt_channels, h, w]`.
    pub fn forward(&self, s1_t1: &Tensor, s1_t2: &Tensor, s2_t1: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        self.run(s1_t1, s1_t2, s2_t1, ctx, None)
    }

    pub fn trace_shapes(&self, s1_t1: &Tensor, s1_t2: &Tensor, s2_t1: &Tensor) -> Result<ShapeTrace> {
        let mut trace = Vec::new();
        crate::tensor::no_grad(|| self.run(s1_t1, s1_t2, s2_t1, &mut Ctx::eval(), Some(&mut trace)))?;
        Ok(trace)
    }

    /// Evaluation-mode synthesis on tagged images.
    pub fn synthesize(&self, s1_t1: &ImageTensor, s1_t2: &ImageTensor, s2_t1: &ImageTensor) -> Result<ImageTensor> {
        let out = crate::tensor::no_grad(|| {
            self.forward(s1_t1.tensor(), s1_t2.tensor(), s2_t1.tensor(), &mut Ctx::eval())
        })?;
        ImageTensor::new(out, ValueRange::Signed)
    }
}
