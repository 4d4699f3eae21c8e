//! Raw numeric loops over contiguous row-major `f64` buffers.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading a tensor of `shape` as if it had `out_shape` (0 on broadcast axes).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let src = contiguous_strides(shape);
    let off = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|d| {
            if d < off || shape[d - off] == 1 {
                0
            } else {
                src[d - off]
            }
        })
        .collect()
}

/// Walks every element of `shape` in row-major order and calls `f(offsets)` once per
/// innermost row, where `offsets[s]` is the start offset of row in source `s`.
fn walk_rows(
    shape: &[usize],
    strides: &[&[usize]],
    mut f: impl FnMut(&[usize]),
) {
    let rank = shape.len();
    if rank <= 1 {
        f(&vec![0; strides.len()]);
        return;
    }
    let outer: usize = shape[..rank - 1].iter().product();
    if outer == 0 {
        return;
    }
    let mut idx = vec![0usize; rank - 1];
    let mut offs = vec![0usize; strides.len()];
    for _ in 0..outer {
        f(&offs);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            for (o, s) in offs.iter_mut().zip(strides) {
                *o += s[d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides) {
                *o -= s[d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

/// Reads `src` through arbitrary per-axis strides into a contiguous buffer of `out_shape`.
pub fn strided_gather(src: &[f64], out_shape: &[usize], strides: &[usize]) -> Vec<f64> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let inner = *out_shape.last().unwrap_or(&1);
    let s_in = *strides.last().unwrap_or(&0);
    walk_rows(out_shape, &[strides], |offs| {
        let base = offs[0];
        if s_in == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            for i in 0..inner {
                out.push(src[base + i * s_in]);
            }
        }
    });
    out
}

pub fn binary_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let y = b[0];
        if a_shape == out_shape {
            return a.iter().map(|&x| f(x, y)).collect();
        }
    }
    if a.len() == 1 {
        let x = a[0];
        if b_shape == out_shape {
            return b.iter().map(|&y| f(x, y)).collect();
        }
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let inner = *out_shape.last().unwrap_or(&1);
    let ia = *sa.last().unwrap_or(&0);
    let ib = *sb.last().unwrap_or(&0);
    walk_rows(out_shape, &[&sa, &sb], |offs| {
        let (oa, ob) = (offs[0], offs[1]);
        match (ia, ib) {
            (1, 1) => {
                for (x, y) in a[oa..oa + inner].iter().zip(&b[ob..ob + inner]) {
                    out.push(f(*x, *y));
                }
            }
            (1, 0) => {
                let y = b[ob];
                for x in &a[oa..oa + inner] {
                    out.push(f(*x, y));
                }
            }
            (0, 1) => {
                let x = a[oa];
                for y in &b[ob..ob + inner] {
                    out.push(f(x, *y));
                }
            }
            _ => {
                for i in 0..inner {
                    out.push(f(a[oa + i * ia], b[ob + i * ib]));
                }
            }
        }
    });
    out
}

/// Sums over `axes`, returning data with the keep-dims shape.
pub fn sum_axes(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut keep = shape.to_vec();
    for &a in axes {
        keep[a] = 1;
    }
    let mut out = vec![0.0; numel(&keep)];
    if data.is_empty() {
        return (keep, out);
    }
    // Output strides expressed on the input index space (0 on reduced axes).
    let ks = contiguous_strides(&keep);
    let os: Vec<usize> = (0..shape.len())
        .map(|d| if axes.contains(&d) { 0 } else { ks[d] })
        .collect();
    let is = contiguous_strides(shape);
    let inner = *shape.last().unwrap_or(&1);
    let o_in = *os.last().unwrap_or(&0);
    walk_rows(shape, &[&is, &os], |offs| {
        let (ii, oo) = (offs[0], offs[1]);
        let row = &data[ii..ii + inner];
        if o_in == 0 {
            out[oo] += row.iter().sum::<f64>();
        } else {
            for (o, x) in out[oo..oo + inner].iter_mut().zip(row) {
                *o += *x;
            }
        }
    });
    (keep, out)
}

/// Splits `shape` around `axis` into (outer, len, inner) block sizes.
pub fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn max_axis(data: &[f64], shape: &[usize], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, len, inner) = axis_blocks(shape, axis);
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let base = (o * len + k) * inner;
            for i in 0..inner {
                let v = data[base + i];
                let slot = o * inner + i;
                if v > out[slot] {
                    out[slot] = v;
                    arg[slot] = k;
                }
            }
        }
    }
    (out, arg)
}

pub fn index_select(
    data: &[f64],
    shape: &[usize],
    axis: usize,
    indices: &[usize],
) -> Vec<f64> {
    let (outer, len, inner) = axis_blocks(shape, axis);
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &k in indices {
            let base = (o * len + k) * inner;
            out.extend_from_slice(&data[base..base + inner]);
        }
    }
    out
}

pub fn index_add(
    src: &[f64],
    src_shape: &[usize],
    axis: usize,
    indices: &[usize],
    out_len: usize,
) -> Vec<f64> {
    let (outer, len, inner) = axis_blocks(src_shape, axis);
    debug_assert_eq!(len, indices.len());
    let mut out = vec![0.0; outer * out_len * inner];
    for o in 0..outer {
        for (j, &k) in indices.iter().enumerate() {
            let s = (o * len + j) * inner;
            let d = (o * out_len + k) * inner;
            for (dst, x) in out[d..d + inner].iter_mut().zip(&src[s..s + inner]) {
                *dst += *x;
            }
        }
    }
    out
}

pub fn concat(parts: &[(&[f64], &[usize])], axis: usize) -> Vec<f64> {
    let (outer, _, inner) = axis_blocks(parts[0].1, axis);
    let total: usize = parts.iter().map(|(d, _)| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (d, s) in parts {
            let chunk = s[axis] * inner;
            out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

pub fn narrow(data: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, full, inner) = axis_blocks(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

pub fn pad_zero(data: &[f64], shape: &[usize], axis: usize, before: usize, after: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_blocks(shape, axis);
    let full = before + len + after;
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let d = (o * full + before) * inner;
        let s = o * len * inner;
        out[d..d + len * inner].copy_from_slice(&data[s..s + len * inner]);
    }
    out
}

pub fn softmax_last(data: &[f64], last: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(last).zip(out.chunks_mut(last)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
    out
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with arbitrary element strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every index dgemm touches inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry shared by convolution, transposed convolution and the weight gradient.
/// `big` is the spatial size on the convolution input side, `small` on its output side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn big(&self) -> usize {
        self.big_h * self.big_w
    }

    pub fn small(&self) -> usize {
        self.small_h * self.small_w
    }
}

/// Unfolds one image `[c, big_h, big_w]` into columns `[c·kh·kw, small_h·small_w]`.
pub fn im2col(x: &[f64], c: usize, g: &ConvGeom, cols: &mut [f64]) {
    let s = g.small();
    for ci in 0..c {
        let plane = &x[ci * g.big()..(ci + 1) * g.big()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * s;
                for oy in 0..g.small_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.small_w..row + (oy + 1) * g.small_w];
                    if iy < 0 || iy >= g.big_h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.big_w..(iy as usize + 1) * g.big_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.big_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating overlaps.
pub fn col2im(cols: &[f64], c: usize, g: &ConvGeom, x: &mut [f64]) {
    let s = g.small();
    for ci in 0..c {
        let plane = &mut x[ci * g.big()..(ci + 1) * g.big()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * s;
                for oy in 0..g.small_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.big_h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.small_w..row + (oy + 1) * g.small_w];
                    let dst = &mut plane[iy as usize * g.big_w..(iy as usize + 1) * g.big_w];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.big_w {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `x [n, c, big]`, `w [o, c, kh, kw]` → `[n, o, small]`.
pub fn conv_forward(x: &[f64], n: usize, c: usize, w: &[f64], o: usize, g: &ConvGeom) -> Vec<f64> {
    let ckk = c * g.kh * g.kw;
    let s = g.small();
    let mut out = vec![0.0; n * o * s];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * s] };
    for b in 0..n {
        let xb = &x[b * c * g.big()..(b + 1) * c * g.big()];
        let rhs: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, g, &mut cols);
            &cols
        };
        gemm(o, ckk, s, w, ckk, 1, rhs, s, 1, 0.0, &mut out[b * o * s..(b + 1) * o * s]);
    }
    out
}

/// `y [n, o, small]`, `w [o, c, kh, kw]` → `[n, c, big]`; the adjoint of [`conv_forward`] in `x`.
pub fn conv_transpose_forward(
    y: &[f64],
    n: usize,
    o: usize,
    w: &[f64],
    c: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let ckk = c * g.kh * g.kw;
    let s = g.small();
    let mut out = vec![0.0; n * c * g.big()];
    let mut cols = vec![0.0; ckk * s];
    for b in 0..n {
        let yb = &y[b * o * s..(b + 1) * o * s];
        let ob = &mut out[b * c * g.big()..(b + 1) * c * g.big()];
        if g.is_pointwise() {
            gemm(ckk, o, s, w, 1, ckk, yb, s, 1, 0.0, ob);
        } else {
            gemm(ckk, o, s, w, 1, ckk, yb, s, 1, 0.0, &mut cols);
            col2im(&cols, c, g, ob);
        }
    }
    out
}

/// `x [n, c, big]`, `gy [n, o, small]` → `Σ_b gy_b · im2col(x_b)ᵀ` with shape `[o, c, kh, kw]`.
pub fn conv_weight_grad(
    x: &[f64],
    n: usize,
    c: usize,
    gy: &[f64],
    o: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let ckk = c * g.kh * g.kw;
    let s = g.small();
    let mut out = vec![0.0; o * ckk];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * s] };
    for b in 0..n {
        let xb = &x[b * c * g.big()..(b + 1) * c * g.big()];
        let colsb: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, g, &mut cols);
            &cols
        };
        let gyb = &gy[b * o * s..(b + 1) * o * s];
        gemm(o, s, ckk, gyb, s, 1, colsb, 1, s, 1.0, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            big_h: 5,
            big_w: 6,
            small_h: 3,
            small_w: 3,
        };
        let x: Vec<f64> = (0..2 * 30).map(|i| (i as f64 * 0.37).sin()).collect();
        let rows = 2 * 9 * g.small();
        let y: Vec<f64> = (0..rows).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; rows];
        im2col(&x, 2, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, 2, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sum_axes_keeps_dims() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (shape, out) = sum_axes(&data, &[2, 3, 4], &[1]);
        assert_eq!(shape, vec![2, 1, 4]);
        assert_eq!(out[0], 0.0 + 4.0 + 8.0);
        let (_, all) = sum_axes(&data, &[2, 3, 4], &[0, 1, 2]);
        assert_eq!(all, vec![276.0]);
    }
}
