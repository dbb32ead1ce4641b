//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated. Values are computed
//! eagerly, so a forward pass doubles as inference; calling
//! [`Tape::backward`] then walks the record in reverse and accumulates one
//! adjoint per node. Leaves are either parameters (gradients wanted) or
//! constants (gradients never propagated into them).
//!
//! ```
//! use trajcast::numeric::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_rows(&[[3.0, -2.0]]).unwrap());
//! let a = tape.abs(w);
//! let loss = tape.mean(a).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[0.5, -0.5]);
//! ```

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleCols(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` did not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if k != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let n = av.cols();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let value = Tensor::from_parts(vec![av.rows(), n], data);
        let rg = self.rg(a) || self.rg(row);
        self.push_checked("add_row", value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * k).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push_checked("scale", value, Op::Scale(a, k), rg)
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_cols(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.cols() != factors.len() {
            return Err(Error::Shape {
                op: "scale_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let n = av.cols();
        let data = av.data().iter().enumerate().map(|(i, x)| x * factors[i % n]).collect();
        let value = Tensor::from_parts(vec![av.rows(), n], data);
        let rg = self.rg(a);
        self.push_checked("scale_cols", value, Op::ScaleCols(a, factors.to_vec()), rg)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push_checked(name, value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Absolute value. Never fails: the input is already finite.
    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x.abs()).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidTensor("concat_rows of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidTensor("concat_cols of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), pv));
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = av.cols();
        let value = Tensor::from_parts(vec![end - start, c], av.data()[start * c..end * c].to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(av.rows() * (end - start));
        for r in 0..av.rows() {
            data.extend_from_slice(&av.data()[r * c + start..r * c + end]);
        }
        let value = Tensor::from_parts(vec![av.rows(), end - start], data);
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s: f64 = av.data().iter().sum();
        let m = s / av.numel() as f64;
        let rg = self.rg(a);
        self.push_checked("mean", Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Runs the chain rule from `loss` back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Param | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.rg(*a) {
                        // dA = G * B^T
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let g_row = &g.data()[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &bv.data()[p * n..(p + 1) * n];
                                da[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, k], da));
                    }
                    if self.rg(*b) {
                        // dB = A^T * G
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let g_row = &g.data()[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *d += aip * gv;
                                }
                            }
                        }
                        accumulate(&mut grads[b.0], Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        let neg = g.data().iter().map(|x| -x).collect();
                        accumulate(&mut grads[b.0], Tensor::from_parts(g.shape().to_vec(), neg));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                    }
                    if self.rg(*b) {
                        let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[b.0], Tensor::from_parts(g.shape().to_vec(), d));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let n = g.cols();
                        let mut d = vec![0.0; n];
                        for chunk in g.data().chunks(n) {
                            for (x, y) in d.iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                        accumulate(&mut grads[row.0], Tensor::from_parts(vec![1, n], d));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, k) => {
                    let d = g.data().iter().map(|x| x * k).collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::ScaleCols(a, factors) => {
                    let n = factors.len();
                    let d = g.data().iter().enumerate().map(|(i, x)| x * factors[i % n]).collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::Sigmoid(a) => {
                    let d = g.data().iter().zip(node.value.data()).map(|(x, s)| x * s * (1.0 - s)).collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::Tanh(a) => {
                    let d = g.data().iter().zip(node.value.data()).map(|(x, t)| x * (1.0 - t * t)).collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::Relu(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, i)| if *i > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::Abs(a) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, i)| {
                            if *i > 0.0 {
                                *x
                            } else if *i < 0.0 {
                                -*x
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        if self.rg(*p) {
                            let d = g.data()[offset * c..(offset + r) * c].to_vec();
                            accumulate(&mut grads[p.0], Tensor::from_parts(vec![r, c], d));
                        }
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (g.rows(), g.cols());
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        if self.rg(*p) {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                            }
                            accumulate(&mut grads[p.0], Tensor::from_parts(vec![rows, c], d));
                        }
                        offset += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut d = vec![0.0; av.numel()];
                    d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![av.rows(), c], d));
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (c, w) = (av.cols(), g.cols());
                    let mut d = vec![0.0; av.numel()];
                    for r in 0..av.rows() {
                        d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![av.rows(), c], d));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let d = vec![g.data()[0]; av.numel()];
                    accumulate(&mut grads[a.0], Tensor::from_parts(av.shape().to_vec(), d));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let d = vec![g.data()[0] / av.numel() as f64; av.numel()];
                    accumulate(&mut grads[a.0], Tensor::from_parts(av.shape().to_vec(), d));
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p), tape.value(a));

        let x = tape.constant(m(&[&[-1.0, 0.0, 2.0]]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn linear_gradient_is_input() {
        // loss = sum(W x) with x fixed: dL/dW[i][j] = x[j]
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[0.3, -0.7, 1.1], &[2.0, 0.0, -1.0]]));
        let x = tape.constant(m(&[&[1.5], &[-2.0], &[0.25]]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap().wrt(w);
        assert_eq!(g.data(), &[1.5, -2.0, 0.25, 1.5, -2.0, 0.25]);
    }

    #[test]
    fn mean_abs_subgradient() {
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[3.0, -2.0]]));
        let a = tape.abs(w);
        let loss = tape.mean(a).unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(w).data(), &[0.5, -0.5]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let loss = tape.mul(used, used).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(used).data(), &[4.0]);
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[1, 2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e308));
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite { op: "scale" })));
    }
}
