//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every node holds its forward value. Parameters enter the tape through
//! [`Tape::param`] and receive their gradients in [`Tape::backward`].
//! Values are treated as matrices: rank-1 and higher tensors are viewed with
//! their last axis as columns. Scalars are `1×1`.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::{ParamId, ParamSet, Tensor};

/// Floor applied inside `ln` and to norms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// matrix times a 1×1 variable
    ScaleBy(Var, Var),
    /// m×n plus a broadcast 1×n row
    AddRow(Var, Var),
    MatMul(Var, Var),
    /// a @ bᵀ
    MatMulBt(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    SelectRow(Var, usize),
    Pick(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Cosine(Var, Var),
    RmsNormRows(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every node that reached it.
#[derive(Debug)]
pub struct Grads {
    per_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.per_node[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

const RMS_EPS: f64 = 1e-6;

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// A constant input. Gradients are still computed for it (see
    /// [`Grads::wrt`]) but nothing is written back anywhere.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut value = params.value(id).clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// Value copy with no path back to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Leaf)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: shape mismatch"
        );
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "scale_by: factor must be scalar");
        let c = self.scalar(s);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        let cols = x.cols();
        assert_eq!(r.numel(), cols, "add_row: row length mismatch");
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r.data()[i % cols])
            .collect();
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(v, Op::AddRow(a, row))
    }

    /// Repeats a `1×n` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let cols = self.value(row).numel();
        let zeros = self.leaf(Tensor::zeros(&[rows, cols]));
        self.add_row(zeros, row)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (dims(self.value(a)), dims(self.value(b)));
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let v = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], v), Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (n, k2)) = (dims(self.value(a)), dims(self.value(b)));
        assert_eq!(k, k2, "matmul_bt: inner dimension mismatch");
        let v = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], v), Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims(self.value(a));
        let v = kernels::transpose(self.value(a).data(), m, n);
        self.push(Tensor::from_parts(vec![n, m], v), Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        kernels::softmax_rows_inplace(&mut data, cols);
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Element-wise square root of a non-negative input. The derivative at
    /// exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(max(x, 1e-12))`.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.push(v, Op::Silu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let (m, n) = dims(self.value(a));
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(self.value(a).row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Tensor::from_parts(vec![1, n], out), Op::RowMean(a))
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Var {
        let x = self.value(a);
        assert!(i < x.rows(), "select_row: index {i} out of range");
        let v = Tensor::from_parts(vec![1, x.cols()], x.row(i).to_vec());
        self.push(v, Op::SelectRow(a, i))
    }

    /// Flat element `i` as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let x = self.value(a).data()[i];
        self.push(Tensor::scalar(x), Op::Pick(a, i))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows: column mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape.to_vec())
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Cosine similarity of two equal-length vectors with a `1e-12` floor on
    /// each norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a).data(), self.value(b).data());
        assert_eq!(x.len(), y.len(), "cosine: length mismatch");
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let na = norm(x).max(LOG_FLOOR);
        let nb = norm(y).max(LOG_FLOOR);
        self.push(Tensor::scalar(dot / (na * nb)), Op::Cosine(a, b))
    }

    /// Per-row `x / sqrt(mean(x²) + 1e-6)`, no learned gain.
    pub fn rms_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let r = (row.iter().map(|v| v * v).sum::<f64>() / cols as f64 + RMS_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= r);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(v, Op::RmsNormRows(a))
    }

    /// Single-head scaled dot-product attention over already-projected
    /// queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let d = self.value(q).cols();
        let logits = self.matmul_bt(q, k);
        let scaled = self.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows(scaled);
        self.matmul(weights, v)
    }

    /// True when every node value on the tape is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
    }

    /// Runs reverse accumulation from a scalar `loss`, adds the parameter
    /// gradients into `params`, and returns the gradient of every node.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<Grads> {
        let grads = self.gradients(loss)?;
        for (&id, &var) in &self.params {
            if let Some(g) = grads.wrt(var) {
                params.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }

    /// Reverse accumulation without touching any parameter buffers.
    pub fn gradients(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::numeric(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Grads { per_node: grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, delta: Vec<f64>| {
            let slot = &mut grads[v.0];
            match slot {
                Some(buf) => buf.iter_mut().zip(&delta).for_each(|(b, d)| *b += d),
                None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                let x = val(*a);
                acc(*a, g.iter().map(|v| v * c).collect());
                acc(*s, vec![g.iter().zip(x).map(|(g, x)| g * x).sum()]);
            }
            Op::AddRow(a, r) => {
                let cols = out.cols();
                let mut dr = vec![0.0; cols];
                for (i, gv) in g.iter().enumerate() {
                    dr[i % cols] += gv;
                }
                acc(*a, g.to_vec());
                acc(*r, dr);
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = out.cols();
                acc(*a, kernels::matmul_bt(g, val(*b), m, n, k));
                acc(*b, kernels::matmul_at(val(*a), g, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = out.cols();
                acc(*a, kernels::matmul(g, val(*b), m, n, k));
                acc(*b, kernels::matmul_at(g, val(*a), m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = dims(out);
                acc(*a, kernels::transpose(g, m, n));
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(p, q)| p * q).sum();
                    for i in span {
                        d[i] = y[i] * (g[i] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * x * g).collect()),
            Op::Sqrt(a) => acc(
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| if *y > 0.0 { g * 0.5 / y } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(a) => acc(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Ln(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > LOG_FLOOR { g / x } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(a) => acc(*a, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Silu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[a.0].value.numel()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::RowMean(a) => {
                let (m, n) = dims(&self.nodes[a.0].value);
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.iter().map(|x| x / m as f64));
                }
                acc(*a, d);
            }
            Op::SelectRow(a, i) => {
                let src = &self.nodes[a.0].value;
                let cols = src.cols();
                let mut d = vec![0.0; src.numel()];
                d[i * cols..(i + 1) * cols].copy_from_slice(g);
                acc(*a, d);
            }
            Op::Pick(a, i) => {
                let mut d = vec![0.0; self.nodes[a.0].value.numel()];
                d[*i] = g[0];
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Cosine(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (nx, ny) = (norm(x), norm(y));
                let (fx, fy) = (nx.max(LOG_FLOOR), ny.max(LOG_FLOOR));
                let c = out.item();
                // d/dx [x·y / (|x||y|)] = y/(|x||y|) - c x/|x|², with the
                // norm term dropped where the floor is active.
                let kx = if nx > LOG_FLOOR { c / (fx * fx) } else { 0.0 };
                let ky = if ny > LOG_FLOOR { c / (fy * fy) } else { 0.0 };
                let inv = 1.0 / (fx * fy);
                acc(*a, x.iter().zip(y).map(|(xi, yi)| g[0] * (yi * inv - kx * xi)).collect());
                acc(*b, x.iter().zip(y).map(|(xi, yi)| g[0] * (xi * inv - ky * yi)).collect());
            }
            Op::RmsNormRows(a) => {
                let cols = out.cols();
                let x = val(*a);
                let mut d = vec![0.0; x.len()];
                for r in 0..x.len() / cols {
                    let span = r * cols..(r + 1) * cols;
                    let ms = x[span.clone()].iter().map(|v| v * v).sum::<f64>() / cols as f64;
                    let rms = (ms + RMS_EPS).sqrt();
                    let y = &out.data()[span.clone()];
                    let gy: f64 = y.iter().zip(&g[span.clone()]).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                    for (j, i) in span.enumerate() {
                        d[i] = (g[i] - y[j] * gy) / rms;
                    }
                }
                acc(*a, d);
            }
        }
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut params = ParamSet::new();
        let id = params
            .add("x", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&params, id);
        let loss = tape.sum(x);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad(id), &[1.0; 6]);
    }

    #[test]
    fn self_dot_grad_is_twice_x() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::row_vector(vec![0.5, -1.5, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&params, id);
        let xx = tape.mul(x, x);
        let loss = tape.sum(xx);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad(id), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let mut params = ParamSet::new();
        assert!(matches!(tape.backward(x, &mut params), Err(Error::Argument(_))));
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::row_vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&params, id);
        let sx = tape.stop_gradient(x);
        let prod = tape.mul(x, sx);
        let loss = tape.sum(prod);
        tape.backward(loss, &mut params).unwrap();
        // only the un-stopped factor contributes: d/dx (x * c) = c
        assert_eq!(params.grad(id), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_param_shares_node() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&params, id);
        let b = tape.param(&params, id);
        assert_eq!(a, b);
    }

    #[test]
    fn single_key_attention_weight_is_exactly_one() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(&[vec![2.0, -1.0], vec![0.1, 9.0]]).unwrap());
        let k = tape.leaf(Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap());
        let v = tape.leaf(Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap());
        let out = tape.attention(q, k, v);
        assert_eq!(tape.value(out).row(0), &[0.1, 0.2, 0.3]);
        assert_eq!(tape.value(out).row(1), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn sqrt_zero_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(vec![0.0, 4.0]).unwrap());
        let y = tape.sqrt(x);
        let l = tape.sum(y);
        let g = tape.gradients(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0, 0.25]);
    }
}
