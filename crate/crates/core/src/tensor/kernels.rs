//! Forward and backward kernels on plain tensors.
//!
//! Every 2-D routine treats its input as `[rows, cols]` where `cols` is the
//! last dimension.

use super::{Tensor, MASKED_LOGIT};
use crate::error::{invalid, Error, Result};

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op,
            left: s.to_vec(),
            right: vec![],
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe in-bounds views of `a` ([m,k]) and `b` ([k,n]);
    // `c` is a fresh row-major [m,n] buffer.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let c = gemm(m, k, n, a.data(), k, 1, b.data(), n, 1);
    Tensor::new(vec![m, n], c)
}

/// `[m,k] x [n,k]^T -> [m,n]`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul_nt", a)?;
    let (n, k2) = require_2d("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let c = gemm(m, k, n, a.data(), k, 1, b.data(), 1, k);
    Tensor::new(vec![m, n], c)
}

/// `[k,m]^T x [k,n] -> [m,n]`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_2d("matmul_tn", a)?;
    let (k2, n) = require_2d("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let c = gemm(m, k, n, a.data(), 1, m, b.data(), n, 1);
    Tensor::new(vec![m, n], c)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = require_2d("transpose", a)?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

/// Multiplies every row of `a` elementwise by the vector `row`.
pub fn mul_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let cols = a.cols();
    if row.numel() != cols {
        return Err(Error::ShapeMismatch {
            op: "mul_row",
            left: a.shape().to_vec(),
            right: row.shape().to_vec(),
        });
    }
    let r = row.data();
    let data = a
        .data()
        .chunks(cols.max(1))
        .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x * y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Gradient of `mul_row` with respect to the broadcast row.
pub fn mul_row_grad_row(a: &Tensor, grad: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = vec![0.0; cols];
    for (ra, rg) in a.data().chunks(cols.max(1)).zip(grad.data().chunks(cols.max(1))) {
        for j in 0..cols {
            out[j] += ra[j] * rg[j];
        }
    }
    Tensor::from_vec(out)
}

/// Row-wise softmax of `x + mask`. `mask` holds 0 for kept and
/// [`MASKED_LOGIT`] for removed positions.
pub fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if let Some(m) = mask {
        same_shape("softmax", x, m)?;
    }
    let cols = x.cols();
    let mut out = x.clone();
    if cols == 0 {
        return Ok(out);
    }
    if let Some(m) = mask {
        for (o, mv) in out.data_mut().iter_mut().zip(m.data()) {
            *o += mv;
        }
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let cols = y.cols().max(1);
    let mut dx = vec![0.0; y.numel()];
    for ((yr, gr), dr) in y.data().chunks(cols).zip(dy.data().chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..yr.len() {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}

/// Builds an additive mask from a keep predicate over `(row, col)`.
pub fn additive_mask(rows: usize, cols: usize, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            if !keep(i, j) {
                data[i * cols + j] = MASKED_LOGIT;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("consistent")
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise `x / sqrt(mean(x^2) + eps)` without a learned gain.
pub fn rmsnorm_rows(x: &Tensor) -> Tensor {
    let cols = x.cols().max(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn rmsnorm_rows_backward(x: &Tensor, y: &Tensor, dy: &Tensor) -> Tensor {
    let cols = x.cols().max(1);
    let mut dx = vec![0.0; x.numel()];
    for (((xr, yr), gr), dr) in x
        .data()
        .chunks(cols)
        .zip(y.data().chunks(cols))
        .zip(dy.data().chunks(cols))
        .zip(dx.chunks_mut(cols))
    {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        let proj = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
        for j in 0..cols {
            dr[j] = inv * (gr[j] - yr[j] * proj);
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("same shape")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Rotation frequency of channel pair `i` for head width `head_dim`.
pub fn rope_frequency(i: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * i as f64 / head_dim as f64)
}

/// Rotate-half RoPE applied independently to every `head_dim`-wide block of
/// each row. Channel `i` pairs with `i + head_dim/2`. `inverse` applies the
/// transposed rotation, which is the backward pass.
pub fn rope(x: &Tensor, head_dim: usize, positions: &[usize], base: f64, inverse: bool) -> Result<Tensor> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(invalid(format!("rope needs an even head dim, got {head_dim}")));
    }
    let cols = x.cols();
    if cols % head_dim != 0 || x.rows() != positions.len() {
        return Err(Error::ShapeMismatch {
            op: "rope",
            left: x.shape().to_vec(),
            right: vec![positions.len(), head_dim],
        });
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| rope_frequency(i, head_dim, base)).collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        let trig: Vec<(f64, f64)> = freqs
            .iter()
            .map(|f| {
                let (s, c) = (pos as f64 * f).sin_cos();
                (c, sign * s)
            })
            .collect();
        for block in row.chunks_mut(head_dim) {
            for (i, &(c, s)) in trig.iter().enumerate() {
                let a = block[i];
                let b = block[i + half];
                block[i] = a * c - b * s;
                block[i + half] = a * s + b * c;
            }
        }
    }
    Ok(out)
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = require_2d("slice_cols", x)?;
    if start + len > c {
        return Err(invalid(format!("column slice {start}..{} out of {c}", start + len)));
    }
    let mut out = Vec::with_capacity(r * len);
    for i in 0..r {
        out.extend_from_slice(&x.row(i)[start..start + len]);
    }
    Tensor::new(vec![r, len], out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |p| p.rows());
    for p in parts {
        require_2d("concat_cols", p)?;
        if p.rows() != rows {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![rows, total], out)
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = require_2d("slice_rows", x)?;
    if start + len > r {
        return Err(invalid(format!("row slice {start}..{} out of {r}", start + len)));
    }
    Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |p| p.cols());
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        require_2d("concat_rows", p)?;
        if p.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        rows += p.rows();
        out.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], out)
}

pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, c) = require_2d("embedding", table)?;
    let mut out = Vec::with_capacity(ids.len() * c);
    for &id in ids {
        if id >= v {
            return Err(invalid(format!("token id {id} outside vocabulary of {v}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), c], out)
}

pub fn select(mask: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("select", a, b)?;
    if mask.len() != a.numel() {
        return Err(Error::ShapeMismatch {
            op: "select",
            left: a.shape().to_vec(),
            right: vec![mask.len()],
        });
    }
    let data = mask
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .map(|(&m, (&x, &y))| if m { x } else { y })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sum(x: &Tensor) -> f64 {
    x.data().iter().sum()
}

pub fn l1_norm(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v.abs()).sum()
}

pub fn l2_norm(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Subgradient of |x|, with 0 at the kink.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Summed token cross-entropy over `(row, target)` pairs, plus row softmax
/// probabilities for the backward pass.
pub fn cross_entropy(logits: &Tensor, targets: &[(usize, usize)]) -> Result<(f64, Tensor)> {
    let (r, v) = require_2d("cross_entropy", logits)?;
    let probs = softmax_rows(logits, None)?;
    let mut loss = 0.0;
    for &(row, t) in targets {
        if row >= r || t >= v {
            return Err(invalid(format!("cross-entropy target ({row},{t}) outside [{r},{v}]")));
        }
        loss -= probs.at2(row, t).max(f64::MIN_POSITIVE).ln();
    }
    Ok((loss, probs))
}
