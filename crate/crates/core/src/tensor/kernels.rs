use super::TensorError;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out` rank, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let j = i + rank - shape.len();
        strides[j] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// For every output element, the flat index into an operand of `shape`.
pub(crate) fn broadcast_index_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; n];
    let mut counter = vec![0usize; out.len()];
    let mut pos = 0usize;
    for slot in idx.iter_mut() {
        *slot = pos;
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            pos += strides[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    idx
}

/// How operand `b` lines up with the output, cheapest case first.
pub(crate) enum Layout {
    Same,
    Scalar,
    /// `b` repeats every `period` elements of the output.
    Suffix(usize),
    General(Vec<usize>),
}

pub(crate) fn layout_of(shape: &[usize], out: &[usize]) -> Layout {
    let n: usize = shape.iter().product();
    if shape == out {
        Layout::Same
    } else if n == 1 {
        Layout::Scalar
    } else {
        let trimmed: Vec<usize> = {
            let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
            shape[first..].to_vec()
        };
        if out.ends_with(&trimmed) {
            Layout::Suffix(n)
        } else {
            Layout::General(broadcast_index_map(shape, out))
        }
    }
}

#[inline]
pub(crate) fn layout_index(layout: &Layout, i: usize) -> usize {
    match layout {
        Layout::Same => i,
        Layout::Scalar => 0,
        Layout::Suffix(p) => i % p,
        Layout::General(m) => m[i],
    }
}

pub(crate) fn broadcast_binary(
    a: &[f32],
    a_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    let n: usize = out_shape.iter().product();
    let la = layout_of(a_shape, out_shape);
    let lb = layout_of(b_shape, out_shape);
    match (&la, &lb) {
        (Layout::Same, Layout::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Suffix(p)) => {
            let mut out = Vec::with_capacity(n);
            for row in a.chunks(*p) {
                out.extend(row.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        (Layout::Same, Layout::Scalar) => a.iter().map(|&x| f(x, b[0])).collect(),
        _ => (0..n)
            .map(|i| f(a[layout_index(&la, i)], b[layout_index(&lb, i)]))
            .collect(),
    }
}

/// Sum `grad` (shaped like `out`) back down to an operand of shape `shape`.
pub(crate) fn reduce_to_shape(grad: &[f32], out: &[usize], shape: &[usize]) -> Vec<f32> {
    let n: usize = shape.iter().product();
    match layout_of(shape, out) {
        Layout::Same => grad.to_vec(),
        Layout::Scalar => vec![grad.iter().sum()],
        Layout::Suffix(p) => {
            let mut acc = vec![0f32; p];
            for row in grad.chunks(p) {
                for (a, &g) in acc.iter_mut().zip(row) {
                    *a += g;
                }
            }
            acc
        }
        Layout::General(map) => {
            let mut acc = vec![0f32; n];
            for (&g, &j) in grad.iter().zip(&map) {
                acc[j] += g;
            }
            acc
        }
    }
}

fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `out = op(a) · op(b)` for row-major `op(a)`: m×k and `op(b)`: k×n.
/// With `trans_a` the buffer `a` holds k×m, with `trans_b` the buffer `b` holds n×k.
/// Accumulates in FP32 in a fixed order.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    out: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let at;
    let a = if trans_a {
        at = transpose(a, k, m);
        &at[..]
    } else {
        a
    };
    let bt;
    let b = if trans_b {
        bt = transpose(b, n, k);
        &bt[..]
    } else {
        b
    };
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn permute(src: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        out.push(src[pos]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            pos -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out, out_shape)
}

/// `x^p` with exact small-integer fast paths so every caller rounds alike.
#[inline]
pub fn pow_scalar(x: f32, p: f32) -> f32 {
    if p == 2.0 {
        x * x
    } else if p == 3.0 {
        x * x * x
    } else if p == 1.0 {
        x
    } else if p == 0.5 {
        x.sqrt()
    } else if p == -0.5 {
        1.0 / x.sqrt()
    } else {
        x.powf(p)
    }
}

pub(crate) const GELU_A: f32 = 0.5;
pub(crate) const GELU_B: f32 = 0.797_884_6; // sqrt(2/pi)
pub(crate) const GELU_C: f32 = 0.044715;

#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    GELU_A * x * (1.0 + (GELU_B * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_B * (x + GELU_C * x * x * x)).tanh();
    GELU_A * (1.0 + t) + GELU_A * x * (1.0 - t * t) * GELU_B * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise softmax over the last axis.
pub(crate) fn softmax_rows(x: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        let inv = 1.0 / sum;
        for oi in o.iter_mut() {
            *oi *= inv;
        }
    }
    out
}

/// Row-wise normalisation without affine parameters. Returns the output,
/// per-row means and reciprocal standard deviations.
pub(crate) fn layer_norm_rows(x: &[f32], cols: usize, eps: f32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / cols;
    let mut out = vec![0f32; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_n = 1.0 / cols as f32;
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = row.iter().sum::<f32>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() * inv_n;
        let rstd = 1.0 / (var + eps).sqrt();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}
