//! Reverse-mode automatic differentiation over a computation tape.
//!
//! A [`Tape`] records matrix-valued primitive operations in the order they
//! are issued, so every node's parents precede it. [`Tape::backward`] walks
//! the record in reverse and accumulates adjoints additively, which is all
//! the loss functions in this crate need.
//!
//! ```
//! use srwgan_core::tape::Tape;
//! use srwgan_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.constant(Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
//! let w = tape.param(Tensor::from_vec(2, 1, vec![3.0, 4.0]).unwrap());
//! let y = tape.matmul(x, w);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Transpose(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let g = self.nodes[a.0].needs_grad;
        self.push(value, op, g)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let g = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.binary(a, b, v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row column count");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.unary(a, v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.unary(a, v, Op::AddScalar(a))
    }

    /// Leaky rectifier; the subgradient at exactly zero is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = crate::tensor::leaky_relu(self.value(a), slope);
        self.unary(a, v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Clamps into `[lo, hi]`; no gradient flows where the input lies outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::log);
        self.unary(a, v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::sqrt);
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).log_softmax_rows();
        self.unary(a, v, Op::LogSoftmax(a))
    }

    /// Row-wise softmax, recorded as `exp(log_softmax(a))`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(a, v, Op::Mean(a))
    }

    /// Sums each row into an `rows × 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let v = Tensor::from_vec(av.rows(), 1, data).expect("row_sums shape");
        self.unary(a, v, Op::RowSums(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&values);
        let g = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice_cols range");
        let mut v = Tensor::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            v.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        self.unary(a, v, Op::SliceCols(a, start))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "cross_entropy label count");
        let ls = lv.log_softmax_rows();
        let n = labels.len().max(1) as f64;
        let total: f64 = labels.iter().enumerate().map(|(i, &y)| -ls.get(i, y)).sum();
        let v = Tensor::scalar(total / n);
        self.unary(logits, v, Op::CrossEntropy(logits, labels.to_vec()))
    }

    /// Euclidean norm of all entries, `sqrt(sum(a²))`.
    pub fn norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.shape() != [1, 1] {
            return Err(Error::NonScalarOutput { rows: out.rows(), cols: out.cols() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            if !upstream.is_finite() {
                return Err(Error::NonFinite(format!("gradient of node {idx}")));
            }
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul_nt(val(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul(val(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, g.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.col_sums());
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { d * s }));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*a, g.zip_map(val(*a), |d, x| if x >= lo && x <= hi { d } else { 0.0 }));
            }
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)),
            Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |d, y| 0.5 * d / y)),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..out.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for (o, ly) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= libm::exp(*ly) * gs;
                    }
                }
                acc(*a, out);
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = val(*a).shape();
                let n = (r * c).max(1) as f64;
                acc(*a, Tensor::filled(r, c, g.item() / n));
            }
            Op::RowSums(a) => {
                let [r, c] = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i).fill(g.get(i, 0));
                }
                acc(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut out = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        out.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    acc(*p, out);
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let [r, c] = val(*a).shape();
                let mut out = Tensor::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    out.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                acc(*a, out);
            }
            Op::CrossEntropy(a, labels) => {
                let logits = val(*a);
                let mut out = logits.softmax_rows();
                let k = g.item() / labels.len().max(1) as f64;
                for (i, &y) in labels.iter().enumerate() {
                    let row = out.row_mut(i);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= k;
                    }
                }
                acc(*a, out);
            }
        }
    }
}
