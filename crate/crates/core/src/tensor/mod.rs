//! A small reverse-mode automatic differentiation engine over dense `f64` tensors.
//!
//! Every backward rule is itself written in terms of differentiable tensor ops, so
//! gradients can be differentiated again (`grad(.., create_graph = true)`). The
//! gradient penalty of the critic objective depends on this.

mod autograd;
pub mod kernels;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use autograd::{grad, grad_with_seed};
pub use kernels::ConvGeom;
pub(crate) use ops::Op;
pub use ops::Unary;

use crate::error::{shape_err, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad-recording mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        GradModeGuard { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording any autograd graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = GradModeGuard::new(false);
    f()
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Immutable, reference-counted dense tensor. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).cloned().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(kernels::numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            node,
        }))
    }

    /// Result of an op: records the graph node when grad mode is on and any parent
    /// requires grad.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op, parents: Vec<Tensor>) -> Self {
        Self::from_op_shared(shape, Arc::new(data), op, parents)
    }

    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        op: Op,
        parents: Vec<Tensor>,
    ) -> Self {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::build(shape, data, true, Some(Node { op, parents }))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    /// Constant tensor (never requires grad).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if kernels::numel(shape) != data.len() {
            return Err(shape_err!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Differentiable leaf.
    pub fn var(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.into_var())
    }

    /// Leaf sharing this tensor's data that requires grad.
    pub fn into_var(self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(Vec::new(), Arc::new(vec![v]), false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![v; kernels::numel(shape)]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let data: Vec<f64> = (0..kernels::numel(shape)).map(f).collect();
        Self::build(shape.to_vec(), Arc::new(data), false, None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| StandardNormal.sample(rng))
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| lo + (hi - lo) * rng.random::<f64>())
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[a, b, c, d] => Ok((a, b, c, d)),
            s => Err(shape_err!("expected rank-4 tensor, got {s:?}")),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests;
