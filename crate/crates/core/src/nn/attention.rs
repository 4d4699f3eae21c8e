use super::{Builder, Conv2d, Linear};
use crate::error::Result;
use crate::tensor::Tensor;

/// Squeeze-excitation gate: global average pool, bottleneck MLP, sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(b: &Builder, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(ChannelAttention {
            fc1: Linear::new(&b.pp("fc1"), channels, hidden, true)?,
            fc2: Linear::new(&b.pp("fc2"), hidden, channels, true)?,
        })
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, _, _) = x.dims4()?;
        let pooled = x.mean_axes(&[2, 3], false)?;
        self.fc2
            .forward(&self.fc1.forward(&pooled)?.relu()?)?
            .sigmoid()?
            .reshape(&[n, c, 1, 1])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.mul(&self.gate(x)?)
    }
}

/// Channel-pooled (mean and max) map through a 7×7 convolution and a sigmoid.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(b: &Builder) -> Result<Self> {
        Ok(SpatialAttention {
            conv: Conv2d::new(&b.pp("conv"), 2, 1, 7, 1, 3, true)?,
        })
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = Tensor::cat(&[&x.mean_axes(&[1], true)?, &x.max_axis(1, true)?], 1)?;
        self.conv.forward(&pooled)?.sigmoid()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.mul(&self.gate(x)?)
    }
}
