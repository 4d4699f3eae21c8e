use std::f64::consts::PI;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{is_grad_enabled, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Sqrt,
    Relu,
    Softplus,
    Mish,
    Gelu,
    Abs,
}

const GELU_K: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / PI).sqrt()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Mish => x * softplus(x).tanh(),
            Unary::Gelu => {
                let u = sqrt_2_over_pi() * (x + GELU_K * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Unary::Abs => x.abs(),
        }
    }

    /// Pointwise derivative from input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Sqrt => 0.5 / y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Mish => {
                let t = softplus(x).tanh();
                t + x * sigmoid(x) * (1.0 - t * t)
            }
            Unary::Gelu => {
                let c = sqrt_2_over_pi();
                let t = (c * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_K * x * x)
            }
            Unary::Abs => x.signum() * if x == 0.0 { 0.0 } else { 1.0 },
        }
    }

    /// The same derivative expressed in differentiable ops, used when a backward
    /// pass itself is being recorded.
    fn derivative_graph(self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        match self {
            Unary::Exp => Ok(y.clone()),
            Unary::Log => x.powf(-1.0),
            Unary::Tanh => y.sqr()?.neg()?.add_scalar(1.0),
            Unary::Sigmoid => y.mul(&y.neg()?.add_scalar(1.0)?),
            Unary::Sqrt => y.powf(-1.0)?.mul_scalar(0.5),
            Unary::Relu | Unary::Abs => Ok(self.derivative_const(x, y)),
            Unary::Softplus => x.sigmoid(),
            Unary::Mish => {
                let t = x.softplus()?.tanh()?;
                let one_minus_t2 = t.sqr()?.neg()?.add_scalar(1.0)?;
                t.add(&x.mul(&x.sigmoid()?)?.mul(&one_minus_t2)?)
            }
            Unary::Gelu => {
                let c = sqrt_2_over_pi();
                let x2 = x.sqr()?;
                let u = x.add(&x2.mul(x)?.mul_scalar(GELU_K)?)?.mul_scalar(c)?;
                let t = u.tanh()?;
                let left = t.add_scalar(1.0)?.mul_scalar(0.5)?;
                let du = x2.mul_scalar(3.0 * GELU_K)?.add_scalar(1.0)?.mul_scalar(c)?;
                let right = x
                    .mul(&t.sqr()?.neg()?.add_scalar(1.0)?)?
                    .mul(&du)?
                    .mul_scalar(0.5)?;
                left.add(&right)
            }
        }
    }

    fn derivative_const(self, x: &Tensor, y: &Tensor) -> Tensor {
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| self.derivative(a, b))
            .collect();
        Tensor::new(data, x.shape()).expect("same shape")
    }
}

pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    PowScalar(f64),
    Unary(Unary),
    ClampMin(f64),
    ClampMax(f64),
    Sum { keep_shape: Vec<usize> },
    MaxAxis { axis: usize, keep_shape: Vec<usize>, argmax: Arc<Vec<usize>> },
    BroadcastTo,
    Reshape,
    Permute(Vec<usize>),
    Concat { axis: usize, sizes: Vec<usize> },
    Narrow { axis: usize, start: usize },
    PadZero { axis: usize, before: usize },
    IndexSelect { axis: usize, indices: Arc<Vec<usize>> },
    IndexAdd { axis: usize, indices: Arc<Vec<usize>> },
    Matmul { ta: bool, tb: bool },
    Conv(ConvGeom),
    ConvTranspose(ConvGeom),
    ConvWeightGrad(ConvGeom),
    Softmax,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::PowScalar(_) => "powf",
            Op::Unary(_) => "unary",
            Op::ClampMin(_) => "clamp_min",
            Op::ClampMax(_) => "clamp_max",
            Op::Sum { .. } => "sum",
            Op::MaxAxis { .. } => "max",
            Op::BroadcastTo => "broadcast_to",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::PadZero { .. } => "pad_zero",
            Op::IndexSelect { .. } => "index_select",
            Op::IndexAdd { .. } => "index_add",
            Op::Matmul { .. } => "matmul",
            Op::Conv(_) => "conv2d",
            Op::ConvTranspose(_) => "conv_transpose2d",
            Op::ConvWeightGrad(_) => "conv_weight_grad",
            Op::Softmax => "softmax",
        }
    }

    /// Gradients for each parent given the upstream gradient `g` of `out`.
    /// Only parents flagged in `needed` are computed.
    pub(crate) fn backward(
        &self,
        out: &Tensor,
        parents: &[Tensor],
        g: &Tensor,
        needed: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let want = |i: usize| needed.get(i).copied().unwrap_or(false);
        let p = parents;
        let grads = match self {
            Op::Add => vec![
                opt(want(0), || g.sum_to(p[0].shape()))?,
                opt(want(1), || g.sum_to(p[1].shape()))?,
            ],
            Op::Sub => vec![
                opt(want(0), || g.sum_to(p[0].shape()))?,
                opt(want(1), || g.neg()?.sum_to(p[1].shape()))?,
            ],
            Op::Mul => vec![
                opt(want(0), || g.mul(&p[1])?.sum_to(p[0].shape()))?,
                opt(want(1), || g.mul(&p[0])?.sum_to(p[1].shape()))?,
            ],
            Op::Div => vec![
                opt(want(0), || g.div(&p[1])?.sum_to(p[0].shape()))?,
                opt(want(1), || {
                    g.mul(out)?.div(&p[1])?.neg()?.sum_to(p[1].shape())
                })?,
            ],
            Op::AddScalar => vec![Some(g.clone())],
            Op::MulScalar(c) => vec![Some(g.mul_scalar(*c)?)],
            Op::PowScalar(e) => {
                let d = p[0].powf(e - 1.0)?.mul_scalar(*e)?;
                vec![Some(g.mul(&d)?)]
            }
            Op::Unary(u) => {
                let d = if is_grad_enabled() {
                    u.derivative_graph(&p[0], out)?
                } else {
                    u.derivative_const(&p[0], out)
                };
                vec![Some(g.mul(&d)?)]
            }
            Op::ClampMin(c) => {
                let mask = p[0].map_const(|v| if v >= *c { 1.0 } else { 0.0 });
                vec![Some(g.mul(&mask)?)]
            }
            Op::ClampMax(c) => {
                let mask = p[0].map_const(|v| if v <= *c { 1.0 } else { 0.0 });
                vec![Some(g.mul(&mask)?)]
            }
            Op::Sum { keep_shape } => {
                vec![Some(g.reshape(keep_shape)?.broadcast_to(p[0].shape())?)]
            }
            Op::MaxAxis {
                axis,
                keep_shape,
                argmax,
            } => {
                let shape = p[0].shape();
                let (outer, len, inner) = kernels::axis_blocks(shape, *axis);
                let mut onehot = vec![0.0; kernels::numel(shape)];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = argmax[o * inner + i];
                        onehot[(o * len + k) * inner + i] = 1.0;
                    }
                }
                let mask = Tensor::new(onehot, shape)?;
                vec![Some(g.reshape(keep_shape)?.broadcast_to(shape)?.mul(&mask)?)]
            }
            Op::BroadcastTo => vec![Some(g.sum_to(p[0].shape())?)],
            Op::Reshape => vec![Some(g.reshape(p[0].shape())?)],
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &d) in perm.iter().enumerate() {
                    inv[d] = i;
                }
                vec![Some(g.permute(&inv)?)]
            }
            Op::Concat { axis, sizes } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(sizes.len());
                for (i, &s) in sizes.iter().enumerate() {
                    v.push(opt(want(i), || g.narrow(*axis, start, s))?);
                    start += s;
                }
                v
            }
            Op::Narrow { axis, start } => {
                let full = p[0].dim(*axis);
                let len = out.dim(*axis);
                vec![Some(g.pad_zero(*axis, *start, full - start - len)?)]
            }
            Op::PadZero { axis, before } => {
                vec![Some(g.narrow(*axis, *before, p[0].dim(*axis))?)]
            }
            Op::IndexSelect { axis, indices } => {
                vec![Some(g.index_add(*axis, indices.clone(), p[0].dim(*axis))?)]
            }
            Op::IndexAdd { axis, indices } => vec![Some(g.index_select(*axis, indices.clone())?)],
            Op::Matmul { ta, tb } => {
                let (a, b) = (&p[0], &p[1]);
                vec![
                    opt(want(0), || {
                        if !ta {
                            g.matmul_t(b, false, !tb)
                        } else {
                            b.matmul_t(g, *tb, true)
                        }
                    })?,
                    opt(want(1), || {
                        if !tb {
                            a.matmul_t(g, !ta, false)
                        } else {
                            g.matmul_t(a, true, *ta)
                        }
                    })?,
                ]
            }
            Op::Conv(geom) => vec![
                opt(want(0), || g.conv_transpose_geom(&p[1], geom))?,
                opt(want(1), || Tensor::conv_weight_grad(&p[0], g, geom))?,
            ],
            Op::ConvTranspose(geom) => vec![
                opt(want(0), || g.conv_geom(&p[1], geom))?,
                opt(want(1), || Tensor::conv_weight_grad(g, &p[0], geom))?,
            ],
            Op::ConvWeightGrad(geom) => vec![
                opt(want(0), || p[1].conv_transpose_geom(g, geom))?,
                opt(want(1), || p[0].conv_geom(g, geom))?,
            ],
            Op::Softmax => {
                let gy = g.mul(out)?;
                let last = out.rank() - 1;
                let s = gy.sum_axes(&[last], true)?;
                vec![Some(gy.sub(&out.mul(&s)?)?)]
            }
        };
        Ok(grads)
    }
}

fn opt(want: bool, f: impl FnOnce() -> Result<Tensor>) -> Result<Option<Tensor>> {
    if want {
        f().map(Some)
    } else {
        Ok(None)
    }
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, op: Op, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let out_shape = kernels::broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| {
            shape_err!(
                "cannot broadcast {:?} with {:?} in {}",
                self.shape(),
                rhs.shape(),
                op.name()
            )
        })?;
        let data = kernels::binary_broadcast(
            self.data(),
            self.shape(),
            rhs.data(),
            rhs.shape(),
            &out_shape,
            f,
        );
        Ok(Tensor::from_op(out_shape, data, op, vec![self.clone(), rhs.clone()]))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Div, |a, b| a / b)
    }

    fn map_op(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, op, vec![self.clone()])
    }

    /// Elementwise map producing a constant (graph-free) tensor.
    pub fn map_const(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_fn(self.shape(), |i| f(self.data()[i]))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Ok(self.map_op(Op::AddScalar, |v| v + c))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        Ok(self.map_op(Op::MulScalar(c), |v| v * c))
    }

    /// `self · scale + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Tensor> {
        self.mul_scalar(scale)?.add_scalar(shift)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn powf(&self, e: f64) -> Result<Tensor> {
        Ok(self.map_op(Op::PowScalar(e), |v| v.powf(e)))
    }

    pub fn sqr(&self) -> Result<Tensor> {
        Ok(self.map_op(Op::PowScalar(2.0), |v| v * v))
    }

    pub fn unary(&self, u: Unary) -> Result<Tensor> {
        Ok(self.map_op(Op::Unary(u), |v| u.apply(v)))
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(Unary::Log)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Unary::Sigmoid)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(Unary::Sqrt)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Unary::Relu)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(Unary::Softplus)
    }

    pub fn mish(&self) -> Result<Tensor> {
        self.unary(Unary::Mish)
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.unary(Unary::Gelu)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary(Unary::Abs)
    }

    pub fn clamp_min(&self, c: f64) -> Result<Tensor> {
        Ok(self.map_op(Op::ClampMin(c), |v| v.max(c)))
    }

    pub fn clamp_max(&self, c: f64) -> Result<Tensor> {
        Ok(self.map_op(Op::ClampMax(c), |v| v.min(c)))
    }

    fn check_axes(&self, axes: &[usize]) -> Result<()> {
        for &a in axes {
            if a >= self.rank() {
                return Err(shape_err!("axis {a} out of range for shape {:?}", self.shape()));
            }
        }
        Ok(())
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.check_axes(axes)?;
        let (keep_shape, data) = kernels::sum_axes(self.data(), self.shape(), axes);
        let out_shape = if keepdim {
            keep_shape.clone()
        } else {
            self.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        Ok(Tensor::from_op(out_shape, data, Op::Sum { keep_shape }, vec![self.clone()]))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.check_axes(axes)?;
        let count: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_axes(axes, keepdim)?.mul_scalar(1.0 / count as f64)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.sum_all()?.mul_scalar(1.0 / self.numel() as f64)
    }

    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axes(&[axis])?;
        let (data, argmax) = kernels::max_axis(self.data(), self.shape(), axis);
        let mut keep_shape = self.shape().to_vec();
        keep_shape[axis] = 1;
        let out_shape = if keepdim {
            keep_shape.clone()
        } else {
            let mut s = self.shape().to_vec();
            s.remove(axis);
            s
        };
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::MaxAxis {
                axis,
                keep_shape,
                argmax: Arc::new(argmax),
            },
            vec![self.clone()],
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        match kernels::broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(shape_err!(
                    "cannot broadcast {:?} to {:?}",
                    self.shape(),
                    shape
                ))
            }
        }
        let strides = kernels::broadcast_strides(self.shape(), shape);
        let data = kernels::strided_gather(self.data(), shape, &strides);
        Ok(Tensor::from_op(shape.to_vec(), data, Op::BroadcastTo, vec![self.clone()]))
    }

    /// Sums broadcast axes away so the result has `shape` (inverse of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let rank = self.rank();
        if shape.len() > rank {
            return Err(shape_err!("cannot sum {:?} to {:?}", self.shape(), shape));
        }
        let off = rank - shape.len();
        let mut axes = Vec::new();
        for d in 0..rank {
            if d < off {
                axes.push(d);
            } else if shape[d - off] == 1 && self.dim(d) != 1 {
                axes.push(d);
            } else if shape[d - off] != self.dim(d) {
                return Err(shape_err!("cannot sum {:?} to {:?}", self.shape(), shape));
            }
        }
        self.sum_axes(&axes, true)?.reshape(shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if kernels::numel(shape) != self.numel() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape(), shape));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        Ok(Tensor::from_op_shared(
            shape.to_vec(),
            self.shared_data(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for rank {rank}"));
        }
        if perm.iter().enumerate().all(|(i, &d)| i == d) {
            return Ok(self.clone());
        }
        let src = kernels::contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&d| self.dim(d)).collect();
        let strides: Vec<usize> = perm.iter().map(|&d| src[d]).collect();
        let data = kernels::strided_gather(self.data(), &out_shape, &strides);
        Ok(Tensor::from_op(out_shape, data, Op::Permute(perm.to_vec()), vec![self.clone()]))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn cat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("cat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(shape_err!("cat axis {axis} out of range for {:?}", first.shape()));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err!(
                    "cat mismatch on axis {axis}: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = sizes.iter().sum();
        let raw: Vec<(&[f64], &[usize])> = parts.iter().map(|p| (p.data(), p.shape())).collect();
        let data = kernels::concat(&raw, axis);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Concat { axis, sizes },
            parts.iter().map(|p| (*p).clone()).collect(),
        ))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axes(&[axis])?;
        if start + len > self.dim(axis) {
            return Err(shape_err!(
                "narrow {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            ));
        }
        if start == 0 && len == self.dim(axis) {
            return Ok(self.clone());
        }
        let data = kernels::narrow(self.data(), self.shape(), axis, start, len);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, data, Op::Narrow { axis, start }, vec![self.clone()]))
    }

    pub fn pad_zero(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        self.check_axes(&[axis])?;
        if before == 0 && after == 0 {
            return Ok(self.clone());
        }
        let data = kernels::pad_zero(self.data(), self.shape(), axis, before, after);
        let mut shape = self.shape().to_vec();
        shape[axis] += before + after;
        Ok(Tensor::from_op(shape, data, Op::PadZero { axis, before }, vec![self.clone()]))
    }

    pub fn index_select(&self, axis: usize, indices: Arc<Vec<usize>>) -> Result<Tensor> {
        self.check_axes(&[axis])?;
        let len = self.dim(axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(shape_err!("index {bad} out of range for axis {axis} of length {len}"));
        }
        let data = kernels::index_select(self.data(), self.shape(), axis, &indices);
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        Ok(Tensor::from_op(shape, data, Op::IndexSelect { axis, indices }, vec![self.clone()]))
    }

    pub fn index_add(&self, axis: usize, indices: Arc<Vec<usize>>, out_len: usize) -> Result<Tensor> {
        self.check_axes(&[axis])?;
        if indices.len() != self.dim(axis) || indices.iter().any(|&i| i >= out_len) {
            return Err(shape_err!("index_add indices inconsistent with {:?}", self.shape()));
        }
        let data = kernels::index_add(self.data(), self.shape(), axis, &indices, out_len);
        let mut shape = self.shape().to_vec();
        shape[axis] = out_len;
        Ok(Tensor::from_op(shape, data, Op::IndexAdd { axis, indices }, vec![self.clone()]))
    }

    /// Matrix product over the last two axes. Supports `[m,k]·[k,n]`, batched
    /// `[b,m,k]·[b,k,n]` and `[b,m,k]·[k,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        match (self.rank(), rhs.rank()) {
            (3, 2) => {
                let (b, m, k) = (self.dim(0), self.dim(1), self.dim(2));
                let flat = self.reshape(&[b * m, k])?.matmul_t(rhs, false, false)?;
                flat.reshape(&[b, m, rhs.dim(1)])
            }
            _ => self.matmul_t(rhs, false, false),
        }
    }

    /// `op(self) · op(rhs)` where `op` transposes the last two axes when the flag is set.
    pub fn matmul_t(&self, rhs: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), rhs.rank());
        if ra != rb || !(ra == 2 || ra == 3) {
            return Err(shape_err!(
                "matmul needs equal rank 2 or 3, got {:?} and {:?}",
                self.shape(),
                rhs.shape()
            ));
        }
        let batch = if ra == 3 { self.dim(0) } else { 1 };
        if ra == 3 && rhs.dim(0) != batch {
            return Err(shape_err!("matmul batch mismatch {:?} vs {:?}", self.shape(), rhs.shape()));
        }
        let (r0, r1) = (self.dim(ra - 2), self.dim(ra - 1));
        let (m, k) = if ta { (r1, r0) } else { (r0, r1) };
        let (q0, q1) = (rhs.dim(rb - 2), rhs.dim(rb - 1));
        let (k2, n) = if tb { (q1, q0) } else { (q0, q1) };
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dims differ: {:?}{} · {:?}{}",
                self.shape(),
                if ta { "ᵀ" } else { "" },
                rhs.shape(),
                if tb { "ᵀ" } else { "" }
            ));
        }
        let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
        let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a = &self.data()[bi * m * k..(bi + 1) * m * k];
            let b = &rhs.data()[bi * k * n..(bi + 1) * k * n];
            kernels::gemm(m, k, n, a, rsa, csa, b, rsb, csb, 0.0, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let shape = if ra == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(Tensor::from_op(shape, out, Op::Matmul { ta, tb }, vec![self.clone(), rhs.clone()]))
    }

    /// Zero-padded 2-D convolution; `self [n,c,h,w]`, `w [o,c,kh,kw]`.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (_, c, h, wd) = self.dims4()?;
        let (_, wc, kh, kw) = w.dims4()?;
        if c != wc {
            return Err(shape_err!("conv2d input has {c} channels, kernel expects {wc}"));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err!(
                "conv2d kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {h}x{wd}"
            ));
        }
        let geom = ConvGeom {
            kh,
            kw,
            stride,
            pad,
            big_h: h,
            big_w: wd,
            small_h: (h + 2 * pad - kh) / stride + 1,
            small_w: (wd + 2 * pad - kw) / stride + 1,
        };
        self.conv_geom(w, &geom)
    }

    /// Transposed convolution; `self [n,o,h,w]`, `w [o,c,kh,kw]` → `[n,c,H,W]`.
    pub fn conv_transpose2d(
        &self,
        w: &Tensor,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Tensor> {
        let (_, o, h, wd) = self.dims4()?;
        let (wo, _, kh, kw) = w.dims4()?;
        if o != wo {
            return Err(shape_err!("conv_transpose2d input has {o} channels, kernel expects {wo}"));
        }
        let big = |s: usize, k: usize| ((s - 1) * stride + k + output_padding).checked_sub(2 * pad);
        let (big_h, big_w) = match (big(h, kh), big(wd, kw)) {
            (Some(a), Some(b)) if a > 0 && b > 0 && stride > 0 => (a, b),
            _ => return Err(shape_err!("conv_transpose2d geometry invalid for input {h}x{wd}")),
        };
        let geom = ConvGeom {
            kh,
            kw,
            stride,
            pad,
            big_h,
            big_w,
            small_h: h,
            small_w: wd,
        };
        self.conv_transpose_geom(w, &geom)
    }

    pub(crate) fn conv_geom(&self, w: &Tensor, g: &ConvGeom) -> Result<Tensor> {
        let (n, c, h, wd) = self.dims4()?;
        let (o, wc, kh, kw) = w.dims4()?;
        if (h, wd, kh, kw, wc) != (g.big_h, g.big_w, g.kh, g.kw, c) {
            return Err(shape_err!("conv input {:?} / kernel {:?} disagree with {g:?}", self.shape(), w.shape()));
        }
        let data = kernels::conv_forward(self.data(), n, c, w.data(), o, g);
        Ok(Tensor::from_op(
            vec![n, o, g.small_h, g.small_w],
            data,
            Op::Conv(*g),
            vec![self.clone(), w.clone()],
        ))
    }

    pub(crate) fn conv_transpose_geom(&self, w: &Tensor, g: &ConvGeom) -> Result<Tensor> {
        let (n, o, h, wd) = self.dims4()?;
        let (wo, c, kh, kw) = w.dims4()?;
        if (h, wd, kh, kw, wo) != (g.small_h, g.small_w, g.kh, g.kw, o) {
            return Err(shape_err!(
                "transposed conv input {:?} / kernel {:?} disagree with {g:?}",
                self.shape(),
                w.shape()
            ));
        }
        let data = kernels::conv_transpose_forward(self.data(), n, o, w.data(), c, g);
        Ok(Tensor::from_op(
            vec![n, c, g.big_h, g.big_w],
            data,
            Op::ConvTranspose(*g),
            vec![self.clone(), w.clone()],
        ))
    }

    pub(crate) fn conv_weight_grad(x: &Tensor, gy: &Tensor, g: &ConvGeom) -> Result<Tensor> {
        let (n, c, h, wd) = x.dims4()?;
        let (n2, o, sh, sw) = gy.dims4()?;
        if n != n2 || (h, wd, sh, sw) != (g.big_h, g.big_w, g.small_h, g.small_w) {
            return Err(Error::Shape(format!(
                "weight-gradient operands {:?} / {:?} disagree with {g:?}",
                x.shape(),
                gy.shape()
            )));
        }
        let data = kernels::conv_weight_grad(x.data(), n, c, gy.data(), o, g);
        Ok(Tensor::from_op(
            vec![o, c, g.kh, g.kw],
            data,
            Op::ConvWeightGrad(*g),
            vec![x.clone(), gy.clone()],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let last = *self
            .shape()
            .last()
            .ok_or_else(|| shape_err!("softmax on a scalar"))?;
        let data = kernels::softmax_last(self.data(), last);
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Softmax, vec![self.clone()]))
    }

    /// Adds a unit axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor> {
        let mut s = self.shape().to_vec();
        if axis > s.len() {
            return Err(shape_err!("unsqueeze axis {axis} out of range"));
        }
        s.insert(axis, 1);
        self.reshape(&s)
    }
}
