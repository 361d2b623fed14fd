//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Every primitive evaluates
//! its value eagerly and records the inputs it needs for the vector-Jacobian
//! product. Because nodes can only reference earlier nodes, creation order
//! is already a topological order and [`Graph::backward`] simply walks the
//! arena in reverse.
//!
//! The graph is rebuilt for every forward pass; nothing is cached between
//! steps.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: column range {start}..{end} out of bounds for {cols} columns")]
    SliceOutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("finite-difference objective returned a non-finite value")]
    NonFiniteObjective,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    SoftmaxRows,
    RowMean,
    RowVariance,
    ReduceMeanRows,
    ReduceMaxRows(Vec<usize>),
    ConcatColumns,
    ConcatRows,
    SliceColumns(usize),
    Sqrt,
    RsqrtShifted,
    Sum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "multiply_elementwise",
            Op::Scale(_) => "scalar_multiply",
            Op::Relu => "relu",
            Op::SoftmaxRows => "softmax_rows",
            Op::RowMean => "row_mean",
            Op::RowVariance => "row_variance",
            Op::ReduceMeanRows => "reduce_mean_rows",
            Op::ReduceMaxRows(_) => "reduce_max_rows",
            Op::ConcatColumns => "concat_columns",
            Op::ConcatRows => "concat_rows",
            Op::SliceColumns(_) => "slice_columns",
            Op::Sqrt => "sqrt",
            Op::RsqrtShifted => "reciprocal_sqrt_shifted",
            Op::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims().map_err(|_| AutodiffError::NotMatrix {
        op,
        shape: t.shape().to_vec(),
    })
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Whether `b` is either the same shape as `a` or a single row broadcast
/// over the rows of `a`.
fn broadcast_rows(op: &'static str, a: &Tensor, b: &Tensor) -> Result<bool> {
    let (ar, ac) = matrix(op, a)?;
    let (br, bc) = matrix(op, b)?;
    if ac != bc {
        return Err(mismatch(op, a, b));
    }
    if ar == br {
        Ok(false)
    } else if br == 1 {
        Ok(true)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let bcast = b.rows() == 1 && r != 1;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let brow = if bcast { b.row(0) } else { b.row(i) };
        out.extend(a.row(i).iter().zip(brow).map(|(&x, &y)| f(x, y)));
    }
    Tensor::from_vec(r, c, out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, Vec::new(), true)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, inputs, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (_, k) = matrix("matmul", ta)?;
        let (k2, _) = matrix("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = ta.matmul(tb);
        self.push(out, Op::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        matrix("transpose", ta)?;
        let out = ta.transpose();
        self.push(out, Op::Transpose, vec![a])
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        broadcast_rows("add", ta, tb)?;
        let out = zip_broadcast(ta, tb, |x, y| x + y);
        self.push(out, Op::Add, vec![a, b])
    }

    /// Elementwise difference; `b` may be a single row broadcast over `a`'s rows.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        broadcast_rows("sub", ta, tb)?;
        let out = zip_broadcast(ta, tb, |x, y| x - y);
        self.push(out, Op::Sub, vec![a, b])
    }

    /// Elementwise product; `b` may be a single row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        broadcast_rows("multiply_elementwise", ta, tb)?;
        let out = zip_broadcast(ta, tb, |x, y| x * y);
        self.push(out, Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(s), vec![a])
    }

    /// Distance of the current point from the nearest non-differentiable
    /// point among gradient-carrying nodes: the smallest `|x|` fed to a relu
    /// and the smallest gap between a column maximum and its runner-up.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Relu => {
                    for &x in self.value(node.inputs[0]).data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::ReduceMaxRows(arg) => {
                    let t = self.value(node.inputs[0]);
                    for (j, &best_row) in arg.iter().enumerate() {
                        let best = t.get(best_row, j);
                        for i in (0..t.rows()).filter(|&i| i != best_row) {
                            margin = margin.min(best - t.get(i, j));
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu, vec![a])
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix("softmax_rows", ta)?;
        if c == 0 {
            return Err(AutodiffError::Empty { op: "softmax_rows" });
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = ta.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - m).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        self.push(Tensor::from_vec(r, c, out), Op::SoftmaxRows, vec![a])
    }

    /// Mean across the columns of each row: `N×C → N×1`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix("row_mean", ta)?;
        if c == 0 {
            return Err(AutodiffError::Empty { op: "row_mean" });
        }
        let out = (0..r)
            .map(|i| ta.row(i).iter().sum::<f64>() / c as f64)
            .collect();
        self.push(Tensor::from_vec(r, 1, out), Op::RowMean, vec![a])
    }

    /// Population variance across the columns of each row: `N×C → N×1`.
    pub fn row_variance(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix("row_variance", ta)?;
        if c == 0 {
            return Err(AutodiffError::Empty { op: "row_variance" });
        }
        let out = (0..r)
            .map(|i| {
                let row = ta.row(i);
                let m = row.iter().sum::<f64>() / c as f64;
                row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64
            })
            .collect();
        self.push(Tensor::from_vec(r, 1, out), Op::RowVariance, vec![a])
    }

    /// Mean over rows, per column: `N×C → 1×C`.
    pub fn reduce_mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, _) = matrix("reduce_mean_rows", ta)?;
        if r == 0 {
            return Err(AutodiffError::Empty {
                op: "reduce_mean_rows",
            });
        }
        let out = ta.sum_rows().scale(1.0 / r as f64);
        self.push(out, Op::ReduceMeanRows, vec![a])
    }

    /// Maximum over rows, per column: `N×C → 1×C`. The gradient of each
    /// column flows to its first (lowest row index) maximal entry.
    pub fn reduce_max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix("reduce_max_rows", ta)?;
        if r == 0 {
            return Err(AutodiffError::Empty {
                op: "reduce_max_rows",
            });
        }
        let mut arg = vec![0usize; c];
        let mut best = ta.row(0).to_vec();
        for i in 1..r {
            for (j, &x) in ta.row(i).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    arg[j] = i;
                }
            }
        }
        self.push(Tensor::from_vec(1, c, best), Op::ReduceMaxRows(arg), vec![a])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Empty {
            op: "concat_columns",
        })?;
        let (r, _) = matrix("concat_columns", self.value(first))?;
        let mut total = 0;
        for &p in parts {
            let tp = self.value(p);
            let (pr, pc) = matrix("concat_columns", tp)?;
            if pr != r {
                return Err(mismatch("concat_columns", self.value(first), tp));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::from_vec(r, total, out),
            Op::ConcatColumns,
            parts.to_vec(),
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(AutodiffError::Empty { op: "concat_rows" })?;
        let (_, c) = matrix("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (pr, pc) = matrix("concat_rows", tp)?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(first), tp));
            }
            rows += pr;
            out.extend_from_slice(tp.data());
        }
        self.push(
            Tensor::from_vec(rows, c, out),
            Op::ConcatRows,
            parts.to_vec(),
        )
    }

    /// Columns `start..end`.
    pub fn slice_columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix("slice_columns", ta)?;
        if start > end || end > c {
            return Err(AutodiffError::SliceOutOfBounds {
                op: "slice_columns",
                start,
                end,
                cols: c,
            });
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&ta.row(i)[start..end]);
        }
        self.push(
            Tensor::from_vec(r, end - start, out),
            Op::SliceColumns(start),
            vec![a],
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt, vec![a])
    }

    /// `1 / sqrt(x + eps)` elementwise.
    pub fn reciprocal_sqrt_shifted(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = self.value(a).map(|x| 1.0 / (x + eps).sqrt());
        self.push(out, Op::RsqrtShifted, vec![a])
    }

    /// Sum of every element, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![a])
    }

    /// Reverse-mode accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (slot, contrib) in self.vjp(node, &g)? {
                let input = node.inputs[slot];
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !contrib.all_finite() {
                    return Err(AutodiffError::NonFinite { op: node.op.name() });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    empty => *empty = Some(contrib),
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf => Some(grads[i].take().unwrap_or_else(|| n.value.zeros_like())),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    /// Vector-Jacobian products of `node` for upstream gradient `g`, as
    /// `(input slot, contribution)` pairs.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let input = |k: usize| self.value(node.inputs[k]);
        let needs = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let mut out = Vec::with_capacity(node.inputs.len());
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                if needs(0) {
                    out.push((0, g.matmul_transposed(b)));
                }
                if needs(1) {
                    out.push((1, a.transposed_matmul(g)));
                }
            }
            Op::Transpose => out.push((0, g.transpose())),
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                out.push((0, g.clone()));
                if needs(1) {
                    let b = input(1);
                    let gb = if b.rows() != g.rows() {
                        g.sum_rows()
                    } else {
                        g.clone()
                    };
                    out.push((1, gb.scale(sign)));
                }
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                if needs(0) {
                    out.push((0, zip_broadcast(g, b, |x, y| x * y)));
                }
                if needs(1) {
                    let prod = zip_broadcast(g, a, |x, y| x * y);
                    let gb = if b.rows() != g.rows() {
                        prod.sum_rows()
                    } else {
                        prod
                    };
                    out.push((1, gb));
                }
            }
            Op::Scale(s) => out.push((0, g.scale(*s))),
            Op::Relu => {
                let a = input(0);
                let data = a
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                out.push((0, Tensor::new(a.shape().to_vec(), data).expect("shape")));
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                out.push((0, Tensor::from_vec(r, c, data)));
            }
            Op::RowMean => {
                let a = input(0);
                let (r, c) = (a.rows(), a.cols());
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gi = g.get(i, 0) / c as f64;
                    data.extend(std::iter::repeat_n(gi, c));
                }
                out.push((0, Tensor::from_vec(r, c, data)));
            }
            Op::RowVariance => {
                let a = input(0);
                let (r, c) = (a.rows(), a.cols());
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = a.row(i);
                    let m = row.iter().sum::<f64>() / c as f64;
                    let gi = g.get(i, 0) * 2.0 / c as f64;
                    data.extend(row.iter().map(|x| gi * (x - m)));
                }
                out.push((0, Tensor::from_vec(r, c, data)));
            }
            Op::ReduceMeanRows => {
                let a = input(0);
                let (r, c) = (a.rows(), a.cols());
                let scaled = g.scale(1.0 / r as f64);
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend_from_slice(scaled.data());
                }
                out.push((0, Tensor::from_vec(r, c, data)));
            }
            Op::ReduceMaxRows(arg) => {
                let a = input(0);
                let mut ga = a.zeros_like();
                for (j, &i) in arg.iter().enumerate() {
                    ga.set(i, j, g.get(0, j));
                }
                out.push((0, ga));
            }
            Op::ConcatColumns => {
                let mut offset = 0;
                for (k, v) in node.inputs.iter().enumerate() {
                    let t = self.value(*v);
                    let (r, c) = (t.rows(), t.cols());
                    if needs(k) {
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        out.push((k, Tensor::from_vec(r, c, data)));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows => {
                let c = g.cols();
                let mut offset = 0;
                for (k, v) in node.inputs.iter().enumerate() {
                    let r = self.value(*v).rows();
                    if needs(k) {
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        out.push((k, Tensor::from_vec(r, c, data)));
                    }
                    offset += r;
                }
            }
            Op::SliceColumns(start) => {
                let a = input(0);
                let mut ga = a.zeros_like();
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, start + j, g.get(i, j));
                    }
                }
                out.push((0, ga));
            }
            Op::Sqrt => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yi, &gi)| gi / (2.0 * yi))
                    .collect();
                out.push((0, Tensor::new(y.shape().to_vec(), data).expect("shape")));
            }
            Op::RsqrtShifted => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yi, &gi)| -0.5 * gi * yi * yi * yi)
                    .collect();
                out.push((0, Tensor::new(y.shape().to_vec(), data).expect("shape")));
            }
            Op::Sum => {
                let a = input(0);
                let gv = g.data()[0];
                let data = vec![gv; a.len()];
                out.push((0, Tensor::new(a.shape().to_vec(), data).expect("shape")));
            }
        }
        Ok(out)
    }
}

/// Gradients of a scalar with respect to every leaf of the graph it was
/// computed on.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. `None` if `v` is not a leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient for a leaf.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` builds a scalar objective from leaves registered for `params` (in
/// order). The relative error per coordinate is
/// `|a − n| / max(1, |a|, |n|)`; the maximum over all coordinates is
/// reported. Objectives with a kink (relu at 0, a tied max) at the sample
/// point will fail the check and should be re-sampled by the caller.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_difference_check_with(f, params, h, |_| {})
}

/// As [`finite_difference_check`], letting the caller tamper with the
/// analytic gradients before comparison. Used to confirm the check fails.
pub fn finite_difference_check_with<F, T>(
    f: F,
    params: &[Tensor],
    h: f64,
    tamper: T,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    T: FnOnce(&mut [Tensor]),
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let mut analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.take(v).expect("leaf gradient"))
        .collect();
    tamper(&mut analytic);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    compare_with_central_differences(&analytic, params, h, eval)
}

/// Compares given analytic gradients against central differences of
/// `eval`, which maps parameter values to the scalar objective.
pub fn compare_with_central_differences<E>(
    analytic: &[Tensor],
    params: &[Tensor],
    h: f64,
    eval: E,
) -> Result<GradCheckReport>
where
    E: Fn(&[Tensor]) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let v = eval(ps)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFiniteObjective)
        }
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for p in 0..work.len() {
        for e in 0..work[p].len() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = (p, e);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
