use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

/// Adam with L2-style weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    #[serde(skip)]
    pub m: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: [f64; 2], weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Param], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!("{} params but {} gradients", params.len(), grads.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, g) in params.iter().zip(grads) {
            let value = p.get();
            if value.shape() != g.shape() {
                return Err(shape_err!("{}: gradient shape {:?} vs {:?}", p.name(), g.shape(), value.shape()));
            }
            let n = value.numel();
            let m = self.m.entry(p.name().to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name().to_string()).or_insert_with(|| vec![0.0; n]);
            let mut out = value.to_vec();
            for i in 0..n {
                let gi = g.data()[i] + self.weight_decay * out[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                out[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.set(Tensor::new(out, value.shape())?)?;
        }
        Ok(())
    }
}

/// Learning-rate halving on a higher-is-better metric: after `patience`
/// consecutive epochs without strict improvement the rate is multiplied by
/// `factor` and the count restarts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceLrOnPlateau {
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        ReduceLrOnPlateau {
            patience,
            factor,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// Feeds one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if metric <= b => self.bad_epochs += 1,
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.reductions += 1;
            return lr * self.factor;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let store = ParamStore::new(0);
        let p = store.root().param("w", Tensor::new(vec![1.0, -2.0], &[2]).unwrap()).unwrap();
        let mut opt = Adam::new(0.1, [0.9, 0.999], 0.0);
        opt.step(&[p.clone()], &[Tensor::new(vec![0.5, -3.0], &[2]).unwrap()]).unwrap();
        let v = p.get().to_vec();
        assert!((v[0] - 0.9).abs() < 1e-7 && (v[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_freezes() {
        let store = ParamStore::new(0);
        let p = store.root().param("w", Tensor::new(vec![1.0], &[1]).unwrap()).unwrap();
        let mut opt = Adam::new(0.0, [0.9, 0.999], 1e-5);
        opt.step(&[p.clone()], &[Tensor::new(vec![4.0], &[1]).unwrap()]).unwrap();
        assert_eq!(p.get().to_vec(), vec![1.0]);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let store = ParamStore::new(0);
        let p = store.root().param("w", Tensor::new(vec![2.0], &[1]).unwrap()).unwrap();
        let mut opt = Adam::new(1.0, [0.0, 0.0], 0.5);
        opt.step(&[p.clone()], &[Tensor::new(vec![0.0], &[1]).unwrap()]).unwrap();
        // g = 0.5·2 = 1, so m̂ = v̂^½ = 1 and the step is −lr
        assert!((p.get().to_vec()[0] - 1.0).abs() < 1e-7);
        assert_eq!(opt.m["w"], vec![1.0]);
    }

    #[test]
    fn plateau_examples() {
        let mut s = ReduceLrOnPlateau::new(10, 0.5);
        let mut lr = s.step(20.0, 0.001);
        for _ in 0..9 {
            lr = s.step(19.0, lr);
        }
        assert_eq!(lr, 0.001);
        lr = s.step(19.0, lr);
        assert_eq!(lr, 0.0005);

        let mut s = ReduceLrOnPlateau::new(10, 0.5);
        let mut lr = s.step(20.0, 0.001);
        for _ in 0..8 {
            lr = s.step(19.0, lr);
        }
        lr = s.step(21.0, lr);
        for _ in 0..9 {
            lr = s.step(20.5, lr);
        }
        assert_eq!(lr, 0.001);

        let mut s = ReduceLrOnPlateau::new(10, 0.5);
        let mut lr = 0.001;
        for e in 0..50 {
            lr = s.step(e as f64, lr);
        }
        assert_eq!((lr, s.reductions), (0.001, 0));
    }
}
