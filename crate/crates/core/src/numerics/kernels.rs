//! Value-level kernels shared by the tape forward pass and the public
//! array functions.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// `a[m×k] @ b[k×n]` on flat row-major buffers.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m×k] @ b[n×k]ᵀ`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ @ b[k×n]`.
pub(crate) fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Max-subtracted softmax over `len` elements spaced `stride` apart.
fn softmax_strided(x: &mut [f64], start: usize, len: usize, stride: usize) {
    let max = (0..len).map(|i| x[start + i * stride]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for i in 0..len {
        let e = (x[start + i * stride] - max).exp();
        x[start + i * stride] = e;
        total += e;
    }
    for i in 0..len {
        x[start + i * stride] /= total;
    }
}

pub(crate) fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    let rows = x.len() / cols;
    for r in 0..rows {
        softmax_strided(x, r * cols, cols, 1);
    }
}

/// Softmax along `axis` of an arbitrary-rank tensor.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = v.shape();
    if axis >= shape.len() {
        return Err(Error::argument(format!("axis {axis} out of range for shape {shape:?}")));
    }
    if !v.is_finite() {
        return Err(Error::numeric("softmax input has non-finite entries"));
    }
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = v.data().to_vec();
    for o in 0..outer {
        for inner in 0..stride {
            softmax_strided(&mut out, o * len * stride + inner, len, stride);
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Single-head scaled dot-product attention:
/// `out[i] = Σ_j softmax_j(Q[i]·K[j]/√d) V[j]`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        if t.rank() != 2 {
            return Err(Error::argument(format!("{name} must be a matrix, got {:?}", t.shape())));
        }
    }
    let (m, d) = (q.rows(), q.cols());
    let (n, e) = (v.rows(), v.cols());
    if k.cols() != d || k.rows() != n {
        return Err(Error::argument(format!(
            "attention shape mismatch: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut logits = matmul_bt(q.data(), k.data(), m, d, n);
    let scale = 1.0 / (d as f64).sqrt();
    logits.iter_mut().for_each(|x| *x *= scale);
    softmax_rows_inplace(&mut logits, n);
    Ok(Tensor::from_parts(vec![m, e], matmul(&logits, v.data(), m, n, e)))
}
