use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

type F = dyn Fn(&[Tensor]) -> Result<Tensor>;

/// Central finite differences of a scalar function of several tensors.
fn numeric_grads(f: &F, xs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    {
        xs.iter()
            .enumerate()
            .map(|(which, x)| {
                (0..x.numel())
                    .map(|i| {
                        let eval = |delta: f64| {
                            let mut d = x.to_vec();
                            d[i] += delta;
                            let mut args = xs.to_vec();
                            args[which] = Tensor::new(d, x.shape()).unwrap();
                            f(&args).unwrap().item().unwrap()
                        };
                        (eval(h) - eval(-h)) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_grads(f: &F, xs: &[Tensor], tol: f64) {
    let vars: Vec<Tensor> = xs.iter().map(|x| x.clone().into_var()).collect();
    let out = f(&vars).unwrap();
    let refs: Vec<&Tensor> = vars.iter().collect();
    let analytic = grad(&out, &refs, false).unwrap();
    let numeric = numeric_grads(f, xs, 1e-6);
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n) {
            let scale = 1.0_f64.max(x.abs()).max(y.abs());
            assert!((x - y).abs() / scale < tol, "analytic {x} vs numeric {y}");
        }
    }
}

/// Checks the derivative of `‖∂f/∂xs[0]‖²` with respect to every argument.
fn check_second_order(f: &'static F, xs: &[Tensor], tol: f64) {
    let penalty = move |args: &[Tensor]| -> Result<Tensor> {
        let first = if args[0].requires_grad() {
            args[0].clone()
        } else {
            args[0].clone().into_var()
        };
        let mut full = args.to_vec();
        full[0] = first.clone();
        let out = f(&full)?;
        let g = grad(&out, &[&first], true)?;
        g[0].sqr()?.sum_all()
    };
    check_grads(&penalty, xs, tol);
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

#[test]
fn elementwise_and_broadcast_grads() {
    let mut r = rng();
    let a = Tensor::randn(&[2, 3, 4], &mut r);
    let b = Tensor::randn(&[3, 1], &mut r).map_const(|v| v.abs() + 0.5);
    check_grads(
        &|x: &[Tensor]| {
            x[0].mul(&x[1])?
                .add(&x[0].div(&x[1])?)?
                .sub(&x[1])?
                .sqr()?
                .sum_all()
        },
        &[a, b],
        1e-6,
    );
}

#[test]
fn unary_grads() {
    let mut r = rng();
    let x = Tensor::randn(&[3, 5], &mut r).mul_scalar(2.0).unwrap();
    for u in [
        Unary::Exp,
        Unary::Tanh,
        Unary::Sigmoid,
        Unary::Softplus,
        Unary::Mish,
        Unary::Gelu,
    ] {
        let f = move |x: &[Tensor]| x[0].unary(u)?.sum_all();
        check_grads(&f, &[x.clone()], 1e-6);
    }
    let pos = x.map_const(|v| v.abs() + 0.3);
    check_grads(&|x: &[Tensor]| x[0].log()?.add(&x[0].sqrt()?)?.sum_all(), &[pos], 1e-6);
}

#[test]
fn reduction_shape_grads() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 3, 4], &mut r);
    check_grads(
        &|x: &[Tensor]| {
            let m = x[0].max_axis(1, true)?;
            let s = x[0].sum_axes(&[0, 2], false)?;
            let p = x[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
            let c = Tensor::cat(&[&p, &p.narrow(1, 2, 3)?], 1)?;
            let idx = Arc::new(vec![3, 0, 0, 2]);
            let sel = c.index_select(0, idx)?.pad_zero(1, 1, 2)?;
            m.sqr()?
                .sum_all()?
                .add(&s.sqr()?.sum_all()?)?
                .add(&sel.sin_like()?.sum_all()?)
        },
        &[x],
        1e-6,
    );
}

impl Tensor {
    // smooth nonlinearity for tests only
    fn sin_like(&self) -> Result<Tensor> {
        self.tanh()?.mul(self)
    }
}

#[test]
fn matmul_grads_all_transposes() {
    let mut r = rng();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let a = Tensor::randn(&a_shape, &mut r);
        let b = Tensor::randn(&b_shape, &mut r);
        let f = move |x: &[Tensor]| x[0].matmul_t(&x[1], ta, tb)?.sqr()?.sum_all();
        check_grads(&f, &[a, b], 1e-6);
    }
    let a = Tensor::randn(&[2, 3, 4], &mut r);
    let b = Tensor::randn(&[4, 2], &mut r);
    check_grads(&|x: &[Tensor]| x[0].matmul(&x[1])?.sqr()?.sum_all(), &[a, b], 1e-6);
}

#[test]
fn conv_grads() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 3, 7, 6], &mut r);
    let w = Tensor::randn(&[4, 3, 3, 3], &mut r);
    check_grads(
        &|x: &[Tensor]| x[0].conv2d(&x[1], 2, 1)?.sqr()?.sum_all(),
        &[x.clone(), w.clone()],
        1e-6,
    );
    let y = Tensor::randn(&[2, 4, 3, 3], &mut r);
    check_grads(
        &|x: &[Tensor]| x[0].conv_transpose2d(&x[1], 2, 1, 1)?.sqr()?.sum_all(),
        &[y, w.clone()],
        1e-6,
    );
    let w1 = Tensor::randn(&[5, 3, 1, 1], &mut r);
    check_grads(&|x: &[Tensor]| x[0].conv2d(&x[1], 1, 0)?.sqr()?.sum_all(), &[x, w1], 1e-6);
}

#[test]
fn conv_transpose_output_size() {
    let y = Tensor::zeros(&[1, 2, 8, 8]);
    let w = Tensor::zeros(&[2, 3, 3, 3]);
    let out = y.conv_transpose2d(&w, 2, 1, 1).unwrap();
    assert_eq!(out.shape(), &[1, 3, 16, 16]);
}

#[test]
fn softmax_rows_sum_to_one_and_grad() {
    let mut r = rng();
    let x = Tensor::randn(&[3, 7], &mut r);
    let s = x.softmax_last().unwrap();
    for row in s.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let w = Tensor::randn(&[3, 7], &mut r);
    check_grads(&move |x: &[Tensor]| x[0].softmax_last()?.mul(&w)?.sum_all(), &[x], 1e-6);
}

#[test]
fn second_order_through_conv_and_activations() {
    let mut r = rng();
    let x = Tensor::randn(&[2, 2, 5, 5], &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3], &mut r).mul_scalar(0.5).unwrap();
    let v = Tensor::randn(&[1, 3, 1, 1], &mut r);
    check_second_order(
        &|x: &[Tensor]| {
            let h = x[0].conv2d(&x[1], 2, 1)?;
            let mean = h.mean_axes(&[0, 2, 3], true)?;
            let centered = h.sub(&mean)?;
            let var = centered.sqr()?.mean_axes(&[0, 2, 3], true)?;
            let normed = centered.div(&var.add_scalar(1e-5)?.sqrt()?)?;
            let a = normed.mish()?.mul(&x[2])?;
            let gate = a.max_axis(1, true)?.sigmoid()?;
            a.mul(&gate)?.mean_all()
        },
        &[x, w, v],
        1e-5,
    );
}

#[test]
fn second_order_through_transposed_conv_and_matmul() {
    let mut r = rng();
    let x = Tensor::randn(&[1, 2, 3, 3], &mut r);
    let w = Tensor::randn(&[2, 3, 3, 3], &mut r).mul_scalar(0.5).unwrap();
    let m = Tensor::randn(&[6, 4], &mut r);
    check_second_order(
        &|x: &[Tensor]| {
            let up = x[0].conv_transpose2d(&x[1], 2, 1, 1)?;
            let flat = up.reshape(&[3 * 6, 6])?;
            flat.matmul(&x[2])?.gelu()?.softmax_last()?.sqr()?.sum_all()
        },
        &[x, w, m],
        1e-5,
    );
}

#[test]
fn unreachable_input_is_an_error() {
    let a = Tensor::var(vec![1.0, 2.0], &[2]).unwrap();
    let b = Tensor::var(vec![3.0], &[1]).unwrap();
    let out = a.sum_all().unwrap();
    assert!(grad(&out, &[&b], false).is_err());
    let c = Tensor::new(vec![1.0], &[1]).unwrap();
    assert!(grad(&c.sum_all().unwrap(), &[&a], false).is_err());
}

#[test]
fn no_grad_records_nothing() {
    let a = Tensor::var(vec![1.0, 2.0], &[2]).unwrap();
    let out = no_grad(|| a.mul_scalar(3.0).unwrap());
    assert!(!out.requires_grad());
}

#[test]
fn mish_is_stable_at_extremes() {
    let x = Tensor::new(vec![0.0, 20.0, -20.0, 800.0, -800.0], &[5]).unwrap();
    let y = x.mish().unwrap();
    let d = y.data();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 20.0).abs() < 1e-6);
    assert!(d[2].abs() < 1e-6);
    assert!((d[3] - 800.0).abs() < 1e-9);
    assert!(d[4].abs() < 1e-12);
    assert!(y.all_finite());
}
