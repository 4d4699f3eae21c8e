use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::nn::{avg_pool2, replicate_pad, Builder, Conv2d, ConvTranspose2d, InstanceNorm2d};
use crate::tensor::Tensor;

/// Replicate pad 1, 3×3 conv, Mish.
#[derive(Debug, Clone)]
pub struct MiniConvMish {
    pub conv: Conv2d,
}

impl MiniConvMish {
    pub fn new(b: &Builder, cin: usize, cout: usize) -> Result<Self> {
        Ok(MiniConvMish {
            conv: Conv2d::new(&b.pp("conv"), cin, cout, 3, 1, 0, true)?,
        })
    }

    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&replicate_pad(x, 1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pre_activation(x)?.mish()
    }
}

/// Replicate pad 1, 3×3 conv, instance norm, Mish.
#[derive(Debug, Clone)]
pub struct ConvMishBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm2d,
}

impl ConvMishBlock {
    pub fn new(b: &Builder, cin: usize, cout: usize) -> Result<Self> {
        Ok(ConvMishBlock {
            conv: Conv2d::new(&b.pp("conv"), cin, cout, 3, 1, 0, true)?,
            norm: InstanceNorm2d::new(&b.pp("norm"), cout)?,
        })
    }

    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(&replicate_pad(x, 1)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pre_activation(x)?.mish()
    }
}

/// Output head: replicate pad 1, 3×3 conv, Mish, 1×1 conv, tanh.
#[derive(Debug, Clone)]
pub struct ExtendedConvBlock {
    pub conv: Conv2d,
    pub proj: Conv2d,
}

impl ExtendedConvBlock {
    pub fn new(b: &Builder, cin: usize, mid: usize, cout: usize) -> Result<Self> {
        Ok(ExtendedConvBlock {
            conv: Conv2d::new(&b.pp("conv"), cin, mid, 3, 1, 0, true)?,
            proj: Conv2d::new(&b.pp("proj"), mid, cout, 1, 1, 0, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(&replicate_pad(x, 1)?)?.mish()?;
        // f64 tanh rounds to ±1 past |x| ≈ 19; the shrink keeps the range open
        self.proj.forward(&h)?.tanh()?.mul_scalar(1.0 - f64::EPSILON)
    }
}

fn nearest_up(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let idx = |len: usize| Arc::new((0..2 * len).map(|i| i / 2).collect::<Vec<_>>());
    x.index_select(2, idx(h))?.index_select(3, idx(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Down,
    Up,
}

/// One residual resampling unit: (strided conv | transposed conv) + IN + Mish,
/// plus a resampled skip path with a 1×1 conv when widths differ.
#[derive(Debug, Clone)]
struct ResampleUnit {
    step: Step,
    down: Option<Conv2d>,
    up: Option<ConvTranspose2d>,
    norm: InstanceNorm2d,
    skip: Option<Conv2d>,
}

impl ResampleUnit {
    fn new(b: &Builder, step: Step, cin: usize, cout: usize) -> Result<Self> {
        let (down, up) = match step {
            Step::Down => (Some(Conv2d::new(&b.pp("conv"), cin, cout, 4, 2, 1, true)?), None),
            Step::Up => (None, Some(ConvTranspose2d::new(&b.pp("deconv"), cin, cout, 4, 2, 1, 0)?)),
        };
        let skip = if cin != cout {
            Some(Conv2d::new(&b.pp("skip"), cin, cout, 1, 1, 0, false)?)
        } else {
            None
        };
        Ok(ResampleUnit {
            step,
            down,
            up,
            norm: InstanceNorm2d::new(&b.pp("norm"), cout)?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let main = match (&self.down, &self.up) {
            (Some(c), _) => c.forward(x)?,
            (_, Some(d)) => d.forward(x)?,
            _ => unreachable!(),
        };
        let main = self.norm.forward(&main)?.mish()?;
        let resampled = match self.step {
            Step::Down => avg_pool2(x)?,
            Step::Up => nearest_up(x)?,
        };
        let skip = match &self.skip {
            Some(c) => c.forward(&resampled)?,
            None => resampled,
        };
        main.add(&skip)
    }
}

/// Two 2× downsampling units followed by two 2× upsampling units.
#[derive(Debug, Clone)]
pub struct DownUpBlock {
    units: Vec<ResampleUnit>,
}

impl DownUpBlock {
    pub fn new(b: &Builder, cin: usize, cout: usize) -> Result<Self> {
        let w = cin;
        let plan = [
            (Step::Down, cin, 2 * w),
            (Step::Down, 2 * w, 4 * w),
            (Step::Up, 4 * w, 2 * w),
            (Step::Up, 2 * w, cout),
        ];
        let units = plan
            .iter()
            .enumerate()
            .map(|(i, &(s, a, o))| ResampleUnit::new(&b.pp(&format!("unit{i}")), s, a, o))
            .collect::<Result<_>>()?;
        Ok(DownUpBlock { units })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        for (name, v) in [("height", h), ("width", w)] {
            if v % 4 != 0 {
                return Err(shape_err!("down/up block: {name} {v} is not divisible by 4"));
            }
        }
        let mut y = x.clone();
        for u in &self.units {
            y = u.forward(&y)?;
        }
        Ok(y)
    }

    /// Spatial sizes after each unit, for shape walking.
    pub fn trace_shapes(&self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        let mut y = x.clone();
        let mut out = Vec::new();
        for u in &self.units {
            y = u.forward(&y)?;
            out.push(y.shape().to_vec());
        }
        Ok(out)
    }
}
