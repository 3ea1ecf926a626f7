//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, so node inputs always precede the node itself. [`Graph::backward`]
//! walks the tape in reverse from a scalar loss. Vectors are `1 x n` rows and
//! a batch is one row per sample.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Probability floor applied before taking logs in the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Tensor::new(1, v.len(), v.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Uniform Glorot initialization in `+-sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(m, n, out)
}

/// Dot product with four independent accumulators, so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor::new(m, n, out)
}

/// `a^T * b` where `a` is `m x k` and `b` is `m x n`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(k, n, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Softmax(Var),
    RowNormalize(Var),
    Log(Var),
    Concat(Var, Var),
    DiagEmbed(Var),
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>),
    PickSum(Var, Vec<usize>),
    Sum(Var),
    SelectCols(Var, Vec<usize>),
    ColTransform(Var, Vec<bool>, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::RowNormalize(..) => "row_normalize",
            Op::Log(..) => "log",
            Op::Concat(..) => "concat",
            Op::DiagEmbed(..) => "diag_embed",
            Op::Dropout(..) => "dropout",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::PickSum(..) => "pick_sum",
            Op::Sum(..) => "sum",
            Op::SelectCols(..) => "select_cols",
            Op::ColTransform(..) => "col_transform",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<usize, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Graph {
    /// `training` enables dropout; masks are drawn from `dropout_seed`.
    pub fn new(training: bool, dropout_seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            training,
            rng: seed::rng(dropout_seed, &[seed::tag("dropout")]),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t)
    }

    /// Leaf for parameter `index` of `store`; reused if already on the tape.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Result<Var> {
        if let Some(&v) = self.params.get(&index) {
            return Ok(v);
        }
        let v = self.push(Op::Leaf, store.tensors[index].clone())?;
        self.params.insert(index, v);
        Ok(v)
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        self.param(store, idx)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(self.shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = matmul(ta, tb);
        self.push(Op::MatMul(a, b), out)
    }

    /// `a * b^T`; the batched form of applying weight `b` to row vectors `a`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.cols {
            return Err(self.shape_err(
                "matmul_bt",
                format!("{:?} x {:?}^T", ta.shape(), tb.shape()),
            ));
        }
        let out = matmul_bt(ta, tb);
        self.push(Op::MatMulBt(a, b), out)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(self.shape_err(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, v) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&tb.data) {
                *o += v;
            }
        }
        self.push(Op::AddRow(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.rows, ta.cols, data);
        self.push(Op::Mul(a, b), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|&v| v.max(0.0)).collect());
        self.push(Op::Relu(a), out)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(Op::Softmax(a), out)
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(Op::RowNormalize(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.rows, t.cols, t.data.iter().map(|v| v.ln()).collect());
        self.push(Op::Log(a), out)
    }

    /// Column-wise concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(self.shape_err(
                "concat",
                format!("{:?} with {:?}", ta.shape(), tb.shape()),
            ));
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for r in 0..ta.rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(ta.rows, cols, data);
        self.push(Op::Concat(a, b), out)
    }

    /// `1 x n` row to an `n x n` diagonal matrix.
    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows != 1 {
            return Err(self.shape_err("diag_embed", format!("expected a row, got {:?}", t.shape())));
        }
        let n = t.cols;
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            out.data[i * n + i] = t.data[i];
        }
        self.push(Op::DiagEmbed(a), out)
    }

    /// Inverted dropout: in training mode each entry is kept with
    /// probability `1 - rate` and scaled by `1 / (1 - rate)`; otherwise the
    /// input is returned unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(a);
        let data = t.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.rows, t.cols, data);
        self.push(Op::Dropout(a, mask), out)
    }

    /// Mean over rows of `-ln max(p[r, y_r], 1e-7)`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        if targets.len() != t.rows || targets.iter().any(|&y| y >= t.cols) {
            return Err(self.shape_err(
                "cross_entropy",
                format!("{} targets for {:?}", targets.len(), t.shape()),
            ));
        }
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &y)| -t.at(r, y).clamp(PROB_FLOOR, 1.0).ln())
            .sum::<f64>()
            / t.rows as f64;
        self.push(Op::CrossEntropy(probs, targets.to_vec()), Tensor::scalar(loss))
    }

    /// `sum_r a[r, idx_r]`.
    pub fn pick_sum(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows || idx.iter().any(|&c| c >= t.cols) {
            return Err(self.shape_err(
                "pick_sum",
                format!("{} indices for {:?}", idx.len(), t.shape()),
            ));
        }
        let s = idx.iter().enumerate().map(|(r, &c)| t.at(r, c)).sum();
        self.push(Op::PickSum(a, idx.to_vec()), Tensor::scalar(s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Columns `cols` of `a`, in that order; repeats are allowed.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = cols.iter().find(|&&c| c >= t.cols) {
            return Err(self.shape_err(
                "select_cols",
                format!("column {bad} of {:?}", t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(t.rows * cols.len());
        for r in 0..t.rows {
            let row = t.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let out = Tensor::new(t.rows, cols.len(), data);
        self.push(Op::SelectCols(a, cols.to_vec()), out)
    }

    /// Fixed per-column map `y = f(x) * scale + shift` where `f` is `ln(1 + x)`
    /// on columns flagged in `log1p` and the identity elsewhere.
    pub fn col_transform(&mut self, a: Var, log1p: &[bool], scale: &[f64], shift: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if log1p.len() != t.cols || scale.len() != t.cols || shift.len() != t.cols {
            return Err(self.shape_err(
                "col_transform",
                format!("{} columns, transform for {}", t.cols, scale.len()),
            ));
        }
        let mut out = t.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                let v = &mut out.data[r * t.cols + c];
                let f = if log1p[c] { v.ln_1p() } else { *v };
                *v = f * scale[c] + shift[c];
            }
        }
        self.push(Op::ColTransform(a, log1p.to_vec(), scale.to_vec()), out)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lt.rows,
                cols: lt.cols,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else {
                continue;
            };
            let g = g.clone();
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor| match &mut lo[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, matmul_bt(&g, val(*b)));
                    acc(*b, matmul_at(val(*a), &g));
                }
                Op::MatMulBt(a, b) => {
                    acc(*a, matmul(&g, val(*b)));
                    acc(*b, matmul_at(&g, val(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let ga = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                    let gb = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    acc(*a, Tensor::new(g.rows, g.cols, ga));
                    acc(*b, Tensor::new(g.rows, g.cols, gb));
                }
                Op::Relu(a) => {
                    let ta = val(*a);
                    let d = g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(*a, Tensor::new(g.rows, g.cols, d));
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut d = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
                        for c in 0..g.cols {
                            d.data[r * g.cols + c] = p.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    acc(*a, d);
                }
                Op::RowNormalize(a) => {
                    let (x, y) = (val(*a), &node.value);
                    let mut d = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let s: f64 = x.row(r).iter().sum();
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for c in 0..g.cols {
                            d.data[r * g.cols + c] = (g.at(r, c) - dot) / s;
                        }
                    }
                    acc(*a, d);
                }
                Op::Log(a) => {
                    let x = val(*a);
                    let d = g.data.iter().zip(&x.data).map(|(gv, xv)| gv / xv).collect();
                    acc(*a, Tensor::new(g.rows, g.cols, d));
                }
                Op::Concat(a, b) => {
                    let ca = val(*a).cols;
                    let cb = val(*b).cols;
                    let mut ga = Vec::with_capacity(g.rows * ca);
                    let mut gb = Vec::with_capacity(g.rows * cb);
                    for r in 0..g.rows {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    acc(*a, Tensor::new(g.rows, ca, ga));
                    acc(*b, Tensor::new(g.rows, cb, gb));
                }
                Op::DiagEmbed(a) => {
                    let n = g.rows;
                    acc(*a, Tensor::new(1, n, (0..n).map(|i| g.at(i, i)).collect()));
                }
                Op::Dropout(a, mask) => {
                    let d = g.data.iter().zip(mask).map(|(x, m)| x * m).collect();
                    acc(*a, Tensor::new(g.rows, g.cols, d));
                }
                Op::CrossEntropy(a, targets) => {
                    let p = val(*a);
                    let scale = g.item() / p.rows as f64;
                    let mut d = Tensor::zeros(p.rows, p.cols);
                    for (r, &y) in targets.iter().enumerate() {
                        let pv = p.at(r, y);
                        if (PROB_FLOOR..=1.0).contains(&pv) {
                            d.data[r * p.cols + y] = -scale / pv;
                        }
                    }
                    acc(*a, d);
                }
                Op::PickSum(a, idx) => {
                    let t = val(*a);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for (r, &c) in idx.iter().enumerate() {
                        d.data[r * t.cols + c] = g.item();
                    }
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let t = val(*a);
                    acc(*a, Tensor::new(t.rows, t.cols, vec![g.item(); t.len()]));
                }
                Op::SelectCols(a, cols) => {
                    let t = val(*a);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for r in 0..t.rows {
                        for (j, &c) in cols.iter().enumerate() {
                            d.data[r * t.cols + c] += g.at(r, j);
                        }
                    }
                    acc(*a, d);
                }
                Op::ColTransform(a, log1p, scale) => {
                    let x = val(*a);
                    let mut d = g.clone();
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            let k = r * x.cols + c;
                            let df = if log1p[c] { 1.0 / (1.0 + x.data[k]) } else { 1.0 };
                            d.data[k] *= scale[c] * df;
                        }
                    }
                    acc(*a, d);
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        node: i,
                        op: "backward",
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of every parameter of `store`, zero for parameters that were
    /// not used on this tape.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&i)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.tensors[i].rows, store.tensors[i].cols))
            })
            .collect()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to node `v`, `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument("gradient count".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != store.tensors[i].shape() {
                return Err(Error::Shape {
                    node: i,
                    op: "adam",
                    detail: format!("grad {:?} vs param {:?}", g.shape(), store.tensors[i].shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient for `{}`", store.names[i])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.tensors[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / c1;
                let vh = v.data[j] / c2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Central finite differences of `f` with respect to every parameter scalar.
pub fn finite_difference(
    store: &ParamStore,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<Tensor> {
    let mut work = store.clone();
    let mut out = store.zeros_like();
    for i in 0..store.len() {
        for j in 0..store.tensors[i].len() {
            let orig = work.tensors[i].data[j];
            work.tensors[i].data[j] = orig + h;
            let up = f(&work);
            work.tensors[i].data[j] = orig - h;
            let down = f(&work);
            work.tensors[i].data[j] = orig;
            out[i].data[j] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Largest violation of `|a - n| <= max(rel * max(|a|, |n|), abs)`, as a
/// ratio to the allowed error (<= 1 means within tolerance).
pub fn gradient_mismatch(analytic: &[Tensor], numeric: &[Tensor], rel: f64, abs: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data.iter().zip(&n.data) {
            let allowed = (rel * x.abs().max(y.abs())).max(abs);
            worst = worst.max((x - y).abs() / allowed);
        }
    }
    worst
}

const MAGIC: &[u8; 8] = b"ACCRISK1";

/// Writes named tensors plus a JSON manifest.
///
/// Layout (little-endian): magic `ACCRISK1`, `u32` manifest length, manifest
/// bytes, `u32` tensor count, then per tensor `u16` name length, name bytes,
/// `u32` rows, `u32` cols and `rows * cols` `f64` values.
pub fn save_checkpoint(path: &Path, manifest: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    let manifest = serde_json::to_vec(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(manifest.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&manifest).map_err(io)?;
    w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in store.names.iter().zip(&store.tensors) {
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.rows as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(t.cols as u32).to_le_bytes()).map_err(io)?;
        for v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut read = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
        Ok(buf)
    };
    if read(8)?.as_slice() != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let mlen = u32_of(read(4)?);
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(mlen)?).map_err(|e| bad(&e.to_string()))?;
    let count = u32_of(read(4)?);
    let mut store = ParamStore::default();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(read(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(read(nlen)?).map_err(|_| bad("non-utf8 tensor name"))?;
        let rows = u32_of(read(4)?);
        let cols = u32_of(read(4)?);
        let raw = read(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.push(name, Tensor::new(rows, cols, data));
    }
    Ok((manifest, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut g = Graph::new(false, 0);
        let x = g.input(Tensor::row_vector(&[1.0, -1.0, 0.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data, vec![1.0, 0.0, 0.0]);
        let z = g.input(Tensor::row_vector(&[0.0, 0.0, 0.0])).unwrap();
        let s = g.softmax(z).unwrap();
        assert!(close(&g.value(s).data, &[1.0 / 3.0; 3], 1e-15));
        let t = g.input(Tensor::row_vector(&[1.0, 0.0])).unwrap();
        let s = g.softmax(t).unwrap();
        let e = std::f64::consts::E;
        assert!(close(&g.value(s).data, &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-12));
        assert!(close(&g.value(s).data, &[0.73106, 0.26894], 1e-5));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new(false, 0);
        let a = g.input(Tensor::zeros(2, 3)).unwrap();
        let b = g.input(Tensor::zeros(2, 3)).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { op: "matmul", node: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let c = g.input(Tensor::zeros(1, 3)).unwrap();
        assert!(g.backward(c).is_err());
        assert!(g.input(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let mut g = Graph::new(false, 0);
        let x = g.input(Tensor::row_vector(&[0.3, -1.2, 2.0])).unwrap();
        let p = g.softmax(x).unwrap();
        let l = g.cross_entropy(p, &[1]).unwrap();
        let grads = g.backward(l).unwrap();
        let mut expect = g.value(p).data.clone();
        expect[1] -= 1.0;
        assert!(close(&grads.get(x).unwrap().data, &expect, 1e-12));
    }

    #[test]
    fn relu_gradient_at_negative_and_zero() {
        let mut g = Graph::new(false, 0);
        let x = g.input(Tensor::row_vector(&[-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let ce = |p: &[f64], y: usize| {
            let mut g = Graph::new(false, 0);
            let x = g.input(Tensor::row_vector(p)).unwrap();
            let l = g.cross_entropy(x, &[y]).unwrap();
            g.value(l).item()
        };
        assert_eq!(ce(&[0.0, 1.0, 0.0], 1), 0.0);
        assert!((ce(&[1.0 / 3.0; 3], 2) - 3f64.ln()).abs() < 1e-12);
        assert!((ce(&[1e-9, 0.5, 0.5 - 1e-9], 0) + (1e-7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::row_vector(&[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new(false, 1);
        let a = g.input(x.clone()).unwrap();
        let d = g.dropout(a, 0.4).unwrap();
        assert_eq!(g.value(d), &x);
        let mut g = Graph::new(true, 1);
        let a = g.input(x.clone()).unwrap();
        let d = g.dropout(a, 0.0).unwrap();
        assert_eq!(g.value(d), &x);
        assert!(g.dropout(a, 1.0).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let trials = 10_000;
        let x = Tensor::row_vector(&[1.0, -2.0, 0.5]);
        let mut mean = vec![0.0; 3];
        for s in 0..trials {
            let mut g = Graph::new(true, s);
            let a = g.input(x.clone()).unwrap();
            let d = g.dropout(a, 0.4).unwrap();
            for (m, v) in mean.iter_mut().zip(&g.value(d).data) {
                *m += v / trials as f64;
            }
        }
        for (m, v) in mean.iter().zip(&x.data) {
            assert!((m - v).abs() <= 0.02 * v.abs(), "{m} vs {v}");
        }
    }

    #[test]
    fn adam_steps() {
        let mut store = ParamStore::default();
        store.push("w", Tensor::scalar(0.5));
        let mut adam = Adam::new(&store, 1e-3);
        adam.update(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(store.tensors[0].item(), 0.5);

        let mut store = ParamStore::default();
        store.push("w", Tensor::scalar(0.5));
        let mut adam = Adam::new(&store, 1e-3);
        adam.update(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        let expect = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((store.tensors[0].item() - expect).abs() < 1e-15);
        assert_eq!(adam.step, 1);

        assert!(matches!(
            adam.update(&mut store, &[Tensor::scalar(f64::NAN)]),
            Err(Error::Diverged(_))
        ));
    }

    /// Small net touching every differentiable op.
    fn toy_loss(store: &ParamStore, x: &Tensor, training: bool) -> (Graph, Var) {
        let mut g = Graph::new(training, 17);
        let raw = g.input(x.clone()).unwrap();
        let xi = g.select_cols(raw, &[2, 0, 2]).unwrap();
        let xi = g
            .col_transform(xi, &[true, false, true], &[0.5, 2.0, -1.0], &[0.1, 0.0, 0.3])
            .unwrap();
        let w1 = g.param(store, 0).unwrap();
        let b1 = g.param(store, 1).unwrap();
        let w2 = g.param(store, 2).unwrap();
        let h = g.matmul_bt(xi, w1).unwrap();
        let h = g.add_row(h, b1).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.dropout(h, 0.4).unwrap();
        let hx = g.concat(h, xi).unwrap();
        let o = g.matmul_bt(hx, w2).unwrap();
        let o2 = g.mul(o, o).unwrap();
        let o = g.add(o, o2).unwrap();
        let p = g.softmax(o).unwrap();
        let q = g.row_normalize(p).unwrap();
        let l1 = g.cross_entropy(q, &[0, 2]).unwrap();
        let lg = g.log(p).unwrap();
        let l2 = g.pick_sum(lg, &[1, 1]).unwrap();
        let l = g.add(l1, l2).unwrap();
        // Route a diag-embedded row through a matmul.
        let dv = g.param(store, 3).unwrap();
        let dm = g.diag_embed(dv).unwrap();
        let ones = g.input(Tensor::row_vector(&[1.0, 2.0])).unwrap();
        let dp = g.matmul(ones, dm).unwrap();
        let dp = g.mul(dp, dp).unwrap();
        let ds = g.sum(dp).unwrap();
        let l = g.add(l, ds).unwrap();
        (g, l)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for s in 0..5u64 {
            let mut rng = seed::rng(s, &[]);
            let mut store = ParamStore::default();
            store.push("w1", Tensor::glorot(4, 3, &mut rng));
            store.push("b1", Tensor::glorot(1, 4, &mut rng));
            store.push("w2", Tensor::glorot(3, 7, &mut rng));
            store.push("d", Tensor::glorot(1, 2, &mut rng));
            let x = Tensor::new(2, 3, Tensor::glorot(2, 3, &mut rng).data.iter().map(|v| v.abs()).collect());
            let (g, l) = toy_loss(&store, &x, true);
            let grads = g.backward(l).unwrap();
            let analytic = g.param_grads(&grads, &store);
            let numeric = finite_difference(&store, 1e-5, |p| {
                let (g, l) = toy_loss(p, &x, true);
                g.value(l).item()
            });
            let worst = gradient_mismatch(&analytic, &numeric, 1e-4, 1e-7);
            assert!(worst <= 1.0, "seed {s}: {worst}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = seed::rng(9, &[]);
        let mut store = ParamStore::default();
        store.push("w1", Tensor::glorot(4, 3, &mut rng));
        store.push("b1", Tensor::glorot(1, 4, &mut rng));
        store.push("w2", Tensor::glorot(3, 7, &mut rng));
        store.push("d", Tensor::glorot(1, 2, &mut rng));
        let x = Tensor::new(2, 3, vec![0.3, 1.2, 0.7, 2.0, 0.1, 0.9]);
        let (g, l) = toy_loss(&store, &x, false);
        let grads = g.backward(l).unwrap();
        // The raw input is the first node on the tape.
        let analytic = grads.get(Var(0)).unwrap().clone();
        let mut wrap = ParamStore::default();
        wrap.push("x", x);
        let numeric = finite_difference(&wrap, 1e-5, |p| {
            let (g, l) = toy_loss(&store, &p.tensors[0], false);
            g.value(l).item()
        });
        assert!(gradient_mismatch(&[analytic], &numeric, 1e-4, 1e-7) <= 1.0);
    }

    #[test]
    fn matmul_kernels_agree() {
        let mut rng = seed::rng(8, &[]);
        let a = Tensor::glorot(3, 4, &mut rng);
        let b = Tensor::glorot(4, 5, &mut rng);
        let bt = Tensor::new(
            5,
            4,
            (0..5).flat_map(|j| (0..4).map(move |i| (i, j))).map(|(i, j)| b.at(i, j)).collect(),
        );
        assert!(close(&matmul(&a, &b).data, &matmul_bt(&a, &bt).data, 1e-15));
        let c = Tensor::glorot(3, 5, &mut rng);
        let at = Tensor::new(
            4,
            3,
            (0..4).flat_map(|j| (0..3).map(move |i| (i, j))).map(|(i, j)| a.at(i, j)).collect(),
        );
        assert!(close(&matmul_at(&a, &c).data, &matmul(&at, &c).data, 1e-15));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seed::rng(1, &[]);
        let mut store = ParamStore::default();
        store.push("w", Tensor::glorot(3, 2, &mut rng));
        store.push("bias", Tensor::glorot(1, 2, &mut rng));
        let manifest = serde_json::json!({"kind": "fcn", "lr": 1e-3});
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.ckpt");
        save_checkpoint(&p, &manifest, &store).unwrap();
        let (m2, s2) = load_checkpoint(&p).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(s2, store);
        std::fs::write(&p, b"garbage").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
