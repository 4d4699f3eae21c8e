//! Parameter storage and the layer zoo shared by the generator and the critic.

mod attention;
mod layers;
mod store;

pub use attention::{ChannelAttention, SpatialAttention};
pub use layers::{
    avg_pool2, bilinear_resize, dropout, replicate_pad, spectral_normalize, upsample_nearest2x, BatchNorm2d, Conv2d,
    ConvTranspose2d, InstanceNorm2d, LayerNorm, Linear, SnConv2d,
};
pub use store::{Builder, Param, ParamKind, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-call forward context: train/eval mode plus the RNG that drives dropout.
pub struct Ctx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Ctx { train: true, rng }
    }
}
