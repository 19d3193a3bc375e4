//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a node
//! is added, and [`Graph::backward`] walks the tape in reverse. Parameters live
//! in a [`ParamStore`] and enter a graph as leaves through [`Graph::param`];
//! their gradients come back keyed by [`ParamId`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let current = &mut self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {} is {:?}, got {:?}",
                self.names[id.0],
                current.shape(),
                value.shape()
            )));
        }
        *current = value;
        Ok(())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu { a: Var, tanh: Vec<f64> },
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, rstd: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Transpose(Var),
    Permute { a: Var, indices: Vec<usize> },
    SumAll(Var),
    MinConst { a: Var, cap: f64 },
    NormalizeRows { a: Var, norms: Vec<f64> },
    LogSumExpRows(Var),
    BceProb { p: Var, target: Matrix },
    BceLogits { x: Var, target: Matrix },
    ReplaceRow { a: Var, row: usize, src: Var, src_row: usize },
    StraightThrough(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Probability floor used by [`Graph::bce_prob`].
pub const PROB_EPS: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// A graph that records gradients for parameters.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track: true,
        }
    }

    /// A graph for inference; nothing requires a gradient.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf whose gradient is wanted (tests, probes).
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: self.params.get(id).clone(),
            op: Op::Param,
            requires_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let m = if ta { va.cols() } else { va.rows() };
        let n = if tb { vb.rows() } else { vb.cols() };
        let mut out = Matrix::zeros(m, n);
        gemm(va, ta, vb, tb, &mut out, 1.0, 0.0);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let bias = self.value(row);
        assert_eq!(bias.rows(), 1, "add_row expects a single row");
        let mut out = self.value(a).clone();
        let b = bias.data().to_vec();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let tanh: Vec<f64> = x.data().iter().map(|&v| gelu_tanh(v)).collect();
        let data = x.data().iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(out, Op::Gelu { a, tanh }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a).transpose()).transpose();
        self.push(out, Op::SoftmaxCols(a), &[a])
    }

    /// Row-wise layer normalization with a `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for r in 0..rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g.data()[c] + b.data()[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Matrix::concat_rows(&mats).expect("concat_rows column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let out = self.value(a).select_rows(indices);
        self.push(
            out,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let out = Matrix::from_fn(v.rows(), len, |r, c| v.get(r, start + c));
        self.push(out, Op::SliceCols { a, start }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Gathers flat entries: `out.data[j] = a.data[indices[j]]`, shaped `rows × cols`.
    pub fn permute(&mut self, a: Var, rows: usize, cols: usize, indices: Vec<usize>) -> Var {
        assert_eq!(indices.len(), rows * cols, "permute index count");
        let src = self.value(a).data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let out = Matrix::from_vec(rows, cols, data).expect("permute shape");
        self.push(out, Op::Permute { a, indices }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `min(cap, a)` entrywise; no gradient flows where the cap is active.
    pub fn min_const(&mut self, a: Var, cap: f64) -> Var {
        let out = self.value(a).map(|x| x.min(cap));
        self.push(out, Op::MinConst { a, cap }, &[a])
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let n = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for x in out.row_mut(r) {
                *x /= n;
            }
        }
        self.push(out, Op::NormalizeRows { a, norms }, &[a])
    }

    /// `log Σ_c exp(a[r, c])` as an `r × 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::from_fn(v.rows(), 1, |r, _| logsumexp(v.row(r)));
        self.push(out, Op::LogSumExpRows(a), &[a])
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`.
    pub fn bce_prob(&mut self, p: Var, target: Matrix) -> Var {
        let v = self.value(p);
        assert_eq!(v.shape(), target.shape(), "bce target shape");
        let total: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let out = Matrix::scalar(total / v.len() as f64);
        self.push(out, Op::BceProb { p, target }, &[p])
    }

    /// Mean binary cross-entropy of logits `x` against `target`.
    pub fn bce_logits(&mut self, x: Var, target: Matrix) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape(), target.shape(), "bce target shape");
        let total: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Matrix::scalar(total / v.len() as f64);
        self.push(out, Op::BceLogits { x, target }, &[x])
    }

    /// Copy of `a` with row `row` overwritten by row `src_row` of `src`.
    pub fn replace_row(&mut self, a: Var, row: usize, src: Var, src_row: usize) -> Var {
        let mut out = self.value(a).clone();
        let s = self.value(src).row(src_row).to_vec();
        out.row_mut(row).copy_from_slice(&s);
        self.push(
            out,
            Op::ReplaceRow {
                a,
                row,
                src,
                src_row,
            },
            &[a, src],
        )
    }

    /// Forward value `hard`, gradient passed straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Matrix) -> Var {
        assert_eq!(self.shape(soft), hard.shape(), "straight-through shape");
        self.push(hard, Op::StraightThrough(soft), &[soft])
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        self.backward_from(&[(loss, Matrix::scalar(1.0))])
    }

    /// Reverse pass with explicit output cotangents.
    pub fn backward_from(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed shape");
            accumulate(&mut grads, *v, g);
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads[v.0].take() {
                params.insert(id, g);
            }
        }
        Gradients { nodes: grads, params }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let slot = zeros_like(grads, a, va);
                    if ta {
                        gemm(vb, tb, g, true, slot, 1.0, 1.0);
                    } else {
                        gemm(g, false, vb, !tb, slot, 1.0, 1.0);
                    }
                }
                if self.needs(b) {
                    let slot = zeros_like(grads, b, vb);
                    if tb {
                        gemm(g, true, va, ta, slot, 1.0, 1.0);
                    } else {
                        gemm(va, !ta, g, false, slot, 1.0, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                self.send(grads, a, g);
                self.send(grads, b, g);
            }
            &Op::Sub(a, b) => {
                self.send(grads, a, g);
                if self.needs(b) {
                    accumulate_owned(grads, b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    accumulate_owned(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.needs(b) {
                    accumulate_owned(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            &Op::Div(a, b) => {
                let vb = self.value(b);
                if self.needs(a) {
                    accumulate_owned(grads, a, g.zip_map(vb, |x, y| x / y));
                }
                if self.needs(b) {
                    let t = g.zip_map(&node.value, |x, o| x * o);
                    accumulate_owned(grads, b, t.zip_map(vb, |x, y| -x / y));
                }
            }
            &Op::AddRow(a, row) => {
                self.send(grads, a, g);
                if self.needs(row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate_owned(grads, row, s);
                }
            }
            &Op::Scale(a, f) => {
                if self.needs(a) {
                    accumulate_owned(grads, a, g.map(|x| x * f));
                }
            }
            &Op::AddScalar(a) => self.send(grads, a, g),
            Op::Gelu { a, tanh } => {
                let a = *a;
                if self.needs(a) {
                    let x = self.value(a).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x)
                        .zip(tanh)
                        .map(|((&gv, &v), &t)| gv * gelu_grad(v, t))
                        .collect();
                    accumulate_owned(grads, a, Matrix::from_vec(g.rows(), g.cols(), data).expect("same shape"));
                }
            }
            &Op::Sigmoid(a) => {
                if self.needs(a) {
                    accumulate_owned(grads, a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s)));
                }
            }
            &Op::Exp(a) => {
                if self.needs(a) {
                    accumulate_owned(grads, a, g.zip_map(&node.value, |x, e| x * e));
                }
            }
            &Op::Log(a) => {
                if self.needs(a) {
                    accumulate_owned(grads, a, g.zip_map(self.value(a), |x, v| x / v));
                }
            }
            &Op::SoftmaxRows(a) => {
                if self.needs(a) {
                    accumulate_owned(grads, a, softmax_rows_backward(&node.value, g));
                }
            }
            &Op::SoftmaxCols(a) => {
                if self.needs(a) {
                    let d = softmax_rows_backward(&node.value.transpose(), &g.transpose());
                    accumulate_owned(grads, a, d.transpose());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate_owned(grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        accumulate_owned(grads, *beta, db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            dxhat[c] = g.get(r, c) * gv.data()[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat
                            .iter()
                            .zip(xhat.row(r))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for c in 0..cols {
                            dx.row_mut(r)[c] =
                                rstd[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                    accumulate_owned(grads, *x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        accumulate_owned(grads, p, g.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            &Op::SliceRows { a, start } => {
                if self.needs(a) {
                    let slot = zeros_like(grads, a, self.value(a));
                    let cols = g.cols();
                    let dst = &mut slot.data_mut()[start * cols..(start + g.rows()) * cols];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Op::GatherRows { a, indices } => {
                if self.needs(*a) {
                    let slot = zeros_like(grads, *a, self.value(*a));
                    for (j, &i) in indices.iter().enumerate() {
                        for (d, s) in slot.row_mut(i).iter_mut().zip(g.row(j)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let part = Matrix::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c));
                        accumulate_owned(grads, p, part);
                    }
                    offset += cols;
                }
            }
            &Op::SliceCols { a, start } => {
                if self.needs(a) {
                    let slot = zeros_like(grads, a, self.value(a));
                    for r in 0..g.rows() {
                        let row = &mut slot.row_mut(r)[start..start + g.cols()];
                        for (d, s) in row.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                if self.needs(a) {
                    accumulate_owned(grads, a, g.transpose());
                }
            }
            Op::Permute { a, indices } => {
                if self.needs(*a) {
                    let slot = zeros_like(grads, *a, self.value(*a));
                    let d = slot.data_mut();
                    for (j, &i) in indices.iter().enumerate() {
                        d[i] += g.data()[j];
                    }
                }
            }
            &Op::SumAll(a) => {
                if self.needs(a) {
                    let v = self.value(a);
                    accumulate_owned(grads, a, Matrix::filled(v.rows(), v.cols(), g.item()));
                }
            }
            &Op::MinConst { a, cap } => {
                if self.needs(a) {
                    let d = g.zip_map(self.value(a), |x, v| if v < cap { x } else { 0.0 });
                    accumulate_owned(grads, a, d);
                }
            }
            Op::NormalizeRows { a, norms } => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            d.row_mut(r)[c] = (g.get(r, c) - y.get(r, c) * dot) / norms[r];
                        }
                    }
                    accumulate_owned(grads, *a, d);
                }
            }
            &Op::LogSumExpRows(a) => {
                if self.needs(a) {
                    let mut d = softmax_rows(self.value(a));
                    for r in 0..d.rows() {
                        let s = g.get(r, 0);
                        for x in d.row_mut(r) {
                            *x *= s;
                        }
                    }
                    accumulate_owned(grads, a, d);
                }
            }
            Op::BceProb { p, target } => {
                if self.needs(*p) {
                    let n = target.len() as f64;
                    let s = g.item() / n;
                    let d = self.value(*p).zip_map(target, |p, t| {
                        if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            s * ((1.0 - t) / (1.0 - p) - t / p)
                        }
                    });
                    accumulate_owned(grads, *p, d);
                }
            }
            Op::BceLogits { x, target } => {
                if self.needs(*x) {
                    let s = g.item() / target.len() as f64;
                    let d = self.value(*x).zip_map(target, |x, t| s * (sigmoid(x) - t));
                    accumulate_owned(grads, *x, d);
                }
            }
            &Op::ReplaceRow {
                a,
                row,
                src,
                src_row,
            } => {
                if self.needs(a) {
                    let mut d = g.clone();
                    d.row_mut(row).iter_mut().for_each(|x| *x = 0.0);
                    accumulate_owned(grads, a, d);
                }
                if self.needs(src) {
                    let slot = zeros_like(grads, src, self.value(src));
                    for (d, s) in slot.row_mut(src_row).iter_mut().zip(g.row(row)) {
                        *d += s;
                    }
                }
            }
            &Op::StraightThrough(soft) => self.send(grads, soft, g),
        }
    }

    fn send(&self, grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if self.needs(v) {
            accumulate(grads, v, g);
        }
    }
}

fn zeros_like<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

fn accumulate_owned(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::variable`] (or any
    /// non-parameter node). `None` when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Matrix> {
        self.params
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// `tanh(c·(x + 0.044715·x³))` through a single `exp`.
#[inline]
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
fn gelu_grad(x: f64, t: f64) -> f64 {
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

fn softmax_rows_backward(y: &Matrix, g: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = a * (b - dot);
        }
    }
    d
}
