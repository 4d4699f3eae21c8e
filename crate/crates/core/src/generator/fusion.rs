use crate::error::{shape_err, Result};
use crate::nn::{Builder, Conv2d, Param};
use crate::tensor::Tensor;

/// Query/key/value projections for one of the two inputs.
#[derive(Debug, Clone)]
pub struct Projections {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
}

impl Projections {
    fn new(b: &Builder, channels: usize, qk: usize) -> Result<Self> {
        Ok(Projections {
            query: Conv2d::new(&b.pp("query"), channels, qk, 1, 1, 0, true)?,
            key: Conv2d::new(&b.pp("key"), channels, qk, 1, 1, 0, true)?,
            value: Conv2d::new(&b.pp("value"), channels, channels, 1, 1, 0, true)?,
        })
    }
}

/// Joint linear attention over two aligned feature maps.
///
/// Queries and keys of both inputs are concatenated along channels and
/// L2-normalized per position; each input keeps its own values. The context
/// `Kᵀ·Vᵢ` is averaged over positions, so `Attentionᵢ = Q·(Kᵀ·Vᵢ) / (H·W)`
/// and `yᵢ = inᵢ + γ·Attentionᵢ`.
#[derive(Debug, Clone)]
pub struct FusionAttention {
    pub first: Projections,
    pub second: Projections,
    pub gamma: Param,
    pub channels: usize,
    pub qk: usize,
}

/// Per-position unit-norm along the channel axis.
pub(crate) fn l2_normalize_channels(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_axes(&[1], true)?.add_scalar(1e-12)?.sqrt()?;
    x.div(&norm)
}

impl FusionAttention {
    pub fn new(b: &Builder, channels: usize, qk: usize, gamma_init: f64) -> Result<Self> {
        Ok(FusionAttention {
            first: Projections::new(&b.pp("in1"), channels, qk)?,
            second: Projections::new(&b.pp("in2"), channels, qk)?,
            gamma: b.param("gamma", Tensor::full(&[1], gamma_init))?,
            channels,
            qk,
        })
    }

    /// Normalized joint queries and keys, each `[n, 2·qk, h, w]`.
    pub fn joint_qk(&self, in1: &Tensor, in2: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = Tensor::cat(&[&self.first.query.forward(in1)?, &self.second.query.forward(in2)?], 1)?;
        let k = Tensor::cat(&[&self.first.key.forward(in1)?, &self.second.key.forward(in2)?], 1)?;
        Ok((l2_normalize_channels(&q)?, l2_normalize_channels(&k)?))
    }

    pub fn forward(&self, in1: &Tensor, in2: &Tensor) -> Result<(Tensor, Tensor)> {
        if in1.shape() != in2.shape() {
            return Err(shape_err!(
                "fusion attention inputs differ: {:?} vs {:?}",
                in1.shape(),
                in2.shape()
            ));
        }
        let (n, c, h, w) = in1.dims4()?;
        let npos = h * w;
        let (q, k) = self.joint_qk(in1, in2)?;
        let q = q.reshape(&[n, 2 * self.qk, npos])?;
        let k = k.reshape(&[n, 2 * self.qk, npos])?;
        let gamma = self.gamma.get();
        let attend = |x: &Tensor, proj: &Projections| -> Result<Tensor> {
            let v = proj.value.forward(x)?.reshape(&[n, c, npos])?;
            let context = k.matmul_t(&v, false, true)?;
            let attn = context
                .matmul_t(&q, true, false)?
                .mul_scalar(1.0 / npos as f64)?
                .reshape(&[n, c, h, w])?;
            x.add(&attn.mul(&gamma)?)
        };
        Ok((attend(in1, &self.first)?, attend(in2, &self.second)?))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn zero_gamma_is_identity() {
        let s = ParamStore::new(5);
        let fa = FusionAttention::new(&s.root(), 6, 2, 0.0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[2, 6, 5, 7], &mut r);
        let b = Tensor::randn(&[2, 6, 5, 7], &mut r);
        let (y1, y2) = fa.forward(&a, &b).unwrap();
        assert_eq!(y1.to_vec(), a.to_vec());
        assert_eq!(y2.to_vec(), b.to_vec());
    }

    #[test]
    fn tied_projections_on_equal_inputs_agree() {
        let s = ParamStore::new(6);
        let fa = FusionAttention::new(&s.root(), 4, 1, 0.7).unwrap();
        for (p1, p2) in [
            (&fa.first.query, &fa.second.query),
            (&fa.first.key, &fa.second.key),
            (&fa.first.value, &fa.second.value),
        ] {
            p2.weight.set(p1.weight.get()).unwrap();
            p2.bias.as_ref().unwrap().set(p1.bias.as_ref().unwrap().get()).unwrap();
        }
        let x = Tensor::randn(&[1, 4, 4, 4], &mut ChaCha8Rng::seed_from_u64(2));
        let (y1, y2) = fa.forward(&x, &x).unwrap();
        assert_eq!(y1.to_vec(), y2.to_vec());
        assert_ne!(y1.to_vec(), x.to_vec());
    }

    #[test]
    fn joint_queries_and_keys_have_unit_norm() {
        let s = ParamStore::new(7);
        let fa = FusionAttention::new(&s.root(), 8, 3, 0.0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[1, 8, 3, 3], &mut r);
        let b = Tensor::randn(&[1, 8, 3, 3], &mut r);
        let (q, k) = fa.joint_qk(&a, &b).unwrap();
        for t in [q, k] {
            let norms = t.sqr().unwrap().sum_axes(&[1], false).unwrap();
            assert!(norms.data().iter().all(|v| (v.sqrt() - 1.0).abs() < 1e-6));
        }
        assert!(fa.forward(&a, &Tensor::zeros(&[1, 8, 3, 4])).is_err());
    }
}
