use super::blocks::{ExtendedConvBlock, MiniConvMish};
use super::GeneratorConfig;
use crate::ablation::AblationSpec;
use crate::error::{shape_err, Result};
use crate::nn::{dropout, upsample_nearest2x, Builder, ChannelAttention, Ctx, SpatialAttention};
use crate::tensor::Tensor;

/// Attention-gated multi-scale fusion: channel gates on the two coarsest maps,
/// spatial gates on the two finest, nearest upsampling and concatenation per
/// level, and the bounded output head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub channel_att: [Option<ChannelAttention>; 2],
    pub spatial_att: [Option<SpatialAttention>; 2],
    pub fuse: Vec<MiniConvMish>,
    pub head: ExtendedConvBlock,
    pub dropout_rate: f64,
}

impl Decoder {
    pub fn new(b: &Builder, cfg: &GeneratorConfig, ablation: &AblationSpec) -> Result<Self> {
        let d = cfg.stage_dims();
        let ca = |name: &str, c: usize| -> Result<Option<ChannelAttention>> {
            if ablation.no_channel_att {
                Ok(None)
            } else {
                ChannelAttention::new(&b.pp(name), c, 8).map(Some)
            }
        };
        let sa = |name: &str| -> Result<Option<SpatialAttention>> {
            if ablation.no_spatial_att {
                Ok(None)
            } else {
                SpatialAttention::new(&b.pp(name)).map(Some)
            }
        };
        Ok(Decoder {
            channel_att: [ca("ca4", d[3])?, ca("ca3", d[2])?],
            spatial_att: [sa("sa2")?, sa("sa1")?],
            fuse: vec![
                MiniConvMish::new(&b.pp("fuse3"), d[3] + d[2], d[2])?,
                MiniConvMish::new(&b.pp("fuse2"), d[2] + d[1], d[1])?,
                MiniConvMish::new(&b.pp("fuse1"), d[1] + d[0], d[0])?,
            ],
            head: ExtendedConvBlock::new(&b.pp("head"), d[0], d[0], cfg.opt_channels)?,
            dropout_rate: cfg.dropout_rate,
        })
    }

    pub fn forward(&self, feats: &[Tensor], ctx: &mut Ctx) -> Result<Tensor> {
        let [f1, f2, f3, f4] = feats else {
            return Err(shape_err!("decoder needs 4 feature maps, got {}", feats.len()));
        };
        for pair in feats.windows(2) {
            let (_, _, h, w) = pair[0].dims4()?;
            let (_, _, h2, w2) = pair[1].dims4()?;
            if (h, w) != (2 * h2, 2 * w2) {
                return Err(shape_err!("feature pyramid breaks the 2x chain at {h}x{w} -> {h2}x{w2}"));
            }
        }
        let gate_c = |i: usize, x: &Tensor| match &self.channel_att[i] {
            Some(a) => a.forward(x),
            None => Ok(x.clone()),
        };
        let gate_s = |i: usize, x: &Tensor| match &self.spatial_att[i] {
            Some(a) => a.forward(x),
            None => Ok(x.clone()),
        };
        let skips = [gate_c(1, f3)?, gate_s(0, f2)?, gate_s(1, f1)?];
        let mut x = gate_c(0, f4)?;
        for (level, skip) in skips.iter().enumerate() {
            let up = upsample_nearest2x(&x)?;
            x = self.fuse[level].forward(&Tensor::cat(&[&up, skip], 1)?)?;
            if level < 2 {
                x = dropout(&x, self.dropout_rate, ctx)?;
            }
        }
        self.head.forward(&x)
    }
}
