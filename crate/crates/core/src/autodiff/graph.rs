//! Tape of tensor operations with a reverse sweep.
//!
//! Nodes are appended in evaluation order, so every input id is smaller than
//! the id of its consumer and the tape is acyclic by construction. The reverse
//! sweep walks the tape once from the loss back to the leaves.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::GatherRows(..) => "gather_rows",
            Op::Pick(..) => "pick",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// True for trainable leaves and anything computed from one.
    tracked: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.map.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    sigmoid(x)
}

/// Row-wise `x - logsumexp(x)` over a row-major `rows x cols` buffer.
pub fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
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

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Leaf whose gradient is reported by [`Graph::backward`] when the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        let tracked = t.requires_grad();
        self.push(Op::Leaf, value, tracked)
    }

    /// Trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if t.shape().len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] @ [{k2}x{n}]")));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMul(a, b), value, tracked))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(op, value, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map_op(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(op, value, tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Exp(a), f64::exp)
    }

    /// `x * sigmoid(x)`, composed from primitive ops.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "empty id list".into()));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(shape_err("gather_rows", format!("row {id} of {rows}")));
            }
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        let tracked = self.tracked(table);
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), value, tracked))
    }

    /// One element per row: `out[i] = input[i, cols[i]]`.
    pub fn pick(&mut self, input: Var, cols: &[usize]) -> Result<Var> {
        let (rows, ncols) = self.dims2(input, "pick")?;
        if cols.len() != rows {
            return Err(shape_err("pick", format!("{} indices for {rows} rows", cols.len())));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(rows);
        for (i, &c) in cols.iter().enumerate() {
            if c >= ncols {
                return Err(shape_err("pick", format!("column {c} of {ncols}")));
            }
            data.push(src[i * ncols + c]);
        }
        let tracked = self.tracked(input);
        Ok(self.push(Op::Pick(input, cols.to_vec()), Tensor::vector(data), tracked))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "log_softmax_rows")?;
        let data = log_softmax_rows(self.value(a).data(), cols);
        let value = Tensor::new(vec![rows, cols], data)?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::LogSoftmaxRows(a), value, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Op::Sum(a), Tensor::scalar(s), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, tracked))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns one gradient per trainable leaf, zero-filled when the leaf does
    /// not reach the loss. The graph is not mutated, so repeated calls agree.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.tracked {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                map.insert(Var(idx), t);
            }
        }
        Ok(Gradients { map })
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|g| {
                    // dA = dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += up[i * n + j] * bv[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &|g| {
                    // dB = A^T * dC
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[p * n + j] += aip * up[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|g| g.iter_mut().zip(up).for_each(|(g, u)| *g += u));
                acc(*b, &|g| g.iter_mut().zip(up).for_each(|(g, u)| *g += u));
            }
            Op::Sub(a, b) => {
                acc(*a, &|g| g.iter_mut().zip(up).for_each(|(g, u)| *g += u));
                acc(*b, &|g| g.iter_mut().zip(up).for_each(|(g, u)| *g -= u));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += up[i] * bv[i];
                    }
                });
                acc(*b, &|g| {
                    for i in 0..g.len() {
                        g[i] += up[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &|g| g.iter_mut().zip(up).for_each(|(g, u)| *g += c * u));
            }
            Op::GatherRows(table, ids) => {
                let cols = self.value(*table).shape()[1];
                acc(*table, &|g| {
                    for (j, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            g[id * cols + c] += up[j * cols + c];
                        }
                    }
                });
            }
            Op::Pick(input, cols) => {
                let ncols = self.value(*input).shape()[1];
                acc(*input, &|g| {
                    for (i, &c) in cols.iter().enumerate() {
                        g[i * ncols + c] += up[i];
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                acc(*a, &|g| {
                    for (r, (urow, yrow)) in up.chunks(cols).zip(y.chunks(cols)).enumerate() {
                        let total: f64 = urow.iter().sum();
                        for c in 0..cols {
                            g[r * cols + c] += urow[c] - yrow[c].exp() * total;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += up[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += up[i] * sigmoid(-x[i]);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += up[i] / x[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &|g| {
                    for i in 0..g.len() {
                        g[i] += up[i] * y[i];
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &|g| g.iter_mut().for_each(|g| *g += up[0]));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    let slice = &up[offset..offset + n];
                    acc(*p, &|g| g.iter_mut().zip(slice).for_each(|(g, u)| *g += u));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut col0 = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    acc(*p, &|g| {
                        for i in 0..rows {
                            for c in 0..w {
                                g[i * w + c] += up[i * total + col0 + c];
                            }
                        }
                    });
                    col0 += w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![0.3, -1.0, 2.0]));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_gradient_is_twice_input() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![2.0, -1.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let b = g.param(&Tensor::vector(vec![5.0]));
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.7, 0.0, -1.1]).unwrap());
        let lp = g.log_softmax_rows(w).unwrap();
        let picked = g.pick(lp, &[2, 0]).unwrap();
        let loss = g.sum(picked);
        assert_eq!(g.backward(loss).unwrap(), g.backward(loss).unwrap());
    }

    #[test]
    fn log_softmax_row_gradients_sum_to_zero() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::matrix(2, 4, vec![0.5, 1.5, -2.0, 0.1, 3.0, 0.0, 0.2, -0.4]).unwrap());
        let lp = g.log_softmax_rows(w).unwrap();
        let picked = g.pick(lp, &[1, 3]).unwrap();
        let loss = g.sum(picked);
        let grads = g.backward(loss).unwrap();
        for row in grads.get(w).unwrap().data().chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-16);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }

    #[test]
    fn concat_routes_gradients_back() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.param(&Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let c = g.concat_cols(&[a, b]).unwrap();
        let w = g.constant(Tensor::matrix(1, 3, vec![1.0, 10.0, 100.0]).unwrap());
        let p = g.mul(c, w).unwrap();
        let r = g.concat_rows(&[p, p]).unwrap();
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 20.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[200.0]);
    }
}
