//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order. Because a node can only consume nodes created before
//! it, the record is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Trainable values live in a [`ParamStore`] that the tape borrows
//! immutably; gradients come back as a separate [`Gradients`] buffer so
//! that several recordings can share one store and have their gradients
//! summed afterwards.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors plus their accumulated gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// `grad += scale * g` for every parameter reached by a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.params) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Elu { alpha: f64 },
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Elu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
        }
    }

    /// Derivative; at `x = 0` the positive branch is used.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Elu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    y + alpha
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// `1 x d`, gradient routed to the first maximal row.
    ColMax,
    ColMean,
    ColSum,
    /// `n x 1`, row sums times `1 / n`.
    RowMeanScaled,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SoftmaxVec(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Act(usize, Activation),
    ColMax(usize, Vec<usize>),
    ColMean(usize),
    ColSum(usize),
    RowMeanScaled(usize),
    SumAll(usize),
    RowGather(usize, Vec<usize>),
    RowScale(usize, usize),
    ConcatCols(Vec<usize>),
    Dropout(usize, Vec<f64>),
    CrossEntropy(usize, usize),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// One forward recording.
pub struct Tape<'p> {
    id: u64,
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter, `None` if the root does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf created with [`Tape::variable`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.index).and_then(Option::as_ref)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn tensor(&self, index: usize) -> &Tensor {
        match &self.nodes[index].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    /// Forward value of a variable. Panics if `v` came from another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("variable from another tape");
        self.tensor(i)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(id.0 < self.params.len(), "unknown parameter");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.tensor(ia).matmul(self.tensor(ib))?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.tensor(ia).transpose();
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Transpose(ia), rg))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.tensor(ia), self.tensor(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: match kind {
                    Elementwise::Add => "add",
                    Elementwise::Mul => "mul",
                },
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(match kind {
            Elementwise::Add => {
                let out = ta.zip_map(tb, |x, y| x + y);
                self.push(out, Op::Add(ia, ib), rg)
            }
            Elementwise::Mul => {
                let out = ta.zip_map(tb, |x, y| x * y);
                self.push(out, Op::Mul(ia, ib), rg)
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    /// Scalar times tensor, the only broadcast supported.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.tensor(ia).map(|x| k * x);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Scale(ia, k), rg))
    }

    /// Softmax over an `n x 1` column.
    pub fn softmax_vec(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.tensor(ix);
        if t.is_empty() {
            return Err(Error::Empty { op: "softmax_vec" });
        }
        if t.cols() != 1 {
            return Err(Error::Shape {
                op: "softmax_vec",
                left: t.shape(),
                right: (t.rows(), 1),
            });
        }
        let mut out = t.clone();
        softmax_in_place(out.data_mut());
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SoftmaxVec(ix), rg))
    }

    /// Softmax applied independently to every row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.tensor(ix);
        if t.is_empty() {
            return Err(Error::Empty { op: "softmax_rows" });
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SoftmaxRows(ix), rg))
    }

    /// Row-wise `log(softmax(x))`, computed without forming the softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.tensor(ix);
        if t.is_empty() {
            return Err(Error::Empty {
                op: "log_softmax_rows",
            });
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(ix);
        Ok(self.push(out, Op::LogSoftmaxRows(ix), rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let ix = self.check(x)?;
        if kind == Activation::Identity {
            return Ok(x);
        }
        let out = self.tensor(ix).map(|v| kind.apply(v));
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Act(ix, kind), rg))
    }

    pub fn reduce(&mut self, x: Var, kind: Reduction) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.tensor(ix);
        let (n, d) = t.shape();
        if n == 0 || d == 0 {
            return Err(Error::Empty { op: "reduce" });
        }
        let rg = self.rg(ix);
        Ok(match kind {
            Reduction::ColMax => {
                let mut arg = vec![0usize; d];
                let mut out = t.row(0).to_vec();
                for r in 1..n {
                    for (c, &v) in t.row(r).iter().enumerate() {
                        if v > out[c] {
                            out[c] = v;
                            arg[c] = r;
                        }
                    }
                }
                self.push(Tensor::row_vector(out), Op::ColMax(ix, arg), rg)
            }
            Reduction::ColSum | Reduction::ColMean => {
                let mut out = vec![0.0; d];
                for r in 0..n {
                    for (o, &v) in out.iter_mut().zip(t.row(r)) {
                        *o += v;
                    }
                }
                if kind == Reduction::ColMean {
                    let k = 1.0 / n as f64;
                    out.iter_mut().for_each(|o| *o *= k);
                    self.push(Tensor::row_vector(out), Op::ColMean(ix), rg)
                } else {
                    self.push(Tensor::row_vector(out), Op::ColSum(ix), rg)
                }
            }
            Reduction::RowMeanScaled => {
                let k = 1.0 / n as f64;
                let out = (0..n).map(|r| k * t.row(r).iter().sum::<f64>()).collect();
                self.push(Tensor::column(out), Op::RowMeanScaled(ix), rg)
            }
        })
    }

    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::ColMax)
    }

    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::ColMean)
    }

    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::ColSum)
    }

    pub fn row_mean_scaled(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::RowMeanScaled)
    }

    /// Sum of all entries as a `1 x 1`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.tensor(ix).sum();
        let rg = self.rg(ix);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(ix), rg))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn row_gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.tensor(ix);
        let (n, d) = t.shape();
        let mut out = Tensor::zeros(idx.len(), d);
        for (i, &src) in idx.iter().enumerate() {
            if src >= n {
                return Err(Error::IndexOutOfRange {
                    op: "row_gather",
                    index: src,
                    len: n,
                });
            }
            out.row_mut(i).copy_from_slice(t.row(src));
        }
        let rg = self.rg(ix);
        Ok(self.push(out, Op::RowGather(ix, idx.to_vec()), rg))
    }

    /// Multiplies row `i` of `x` (`n x d`) by `s[i]` (`s` is `n x 1`).
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(s)?);
        let (tx, ts) = (self.tensor(ix), self.tensor(is));
        if ts.shape() != (tx.rows(), 1) {
            return Err(Error::Shape {
                op: "row_scale",
                left: tx.shape(),
                right: ts.shape(),
            });
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let k = ts.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(ix) || self.rg(is);
        Ok(self.push(out, Op::RowScale(ix, is), rg))
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat_cols" });
        }
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.tensor(idx[0]).rows();
        let mut cols = 0;
        for &i in &idx {
            let t = self.tensor(i);
            if t.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.tensor(idx[0]).shape(),
                    right: t.shape(),
                });
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &i in &idx {
                let t = self.tensor(i);
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatCols(idx), rg))
    }

    /// Inverted dropout: entries kept with probability `keep` and scaled by
    /// `1 / keep`. `keep = 1` records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep: f64, rng: &mut R) -> Result<Var> {
        let ix = self.check(x)?;
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::config("keep_rate", format!("{keep} not in (0, 1]")));
        }
        if keep == 1.0 {
            return Ok(x);
        }
        let t = self.tensor(ix);
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let mut out = t.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Dropout(ix, mask), rg))
    }

    /// `-log softmax(logits)[label]` for a `1 x C` row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let il = self.check(logits)?;
        let t = self.tensor(il);
        if t.rows() != 1 || t.cols() == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: t.shape(),
                right: (1, t.cols().max(1)),
            });
        }
        if label >= t.cols() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: t.cols(),
            });
        }
        let loss = cross_entropy_value(t.data(), label);
        let rg = self.rg(il);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(il, label), rg))
    }

    /// Gradients of `root` with respect to every parameter and variable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ir = self.check(root)?;
        let rt = self.tensor(ir);
        if rt.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: rt.rows(),
                cols: rt.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(ir + 1);
        grads.resize_with(ir + 1, || None);
        grads[ir] = Some(Tensor::scalar(1.0));
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(ir + 1, || None);
        let mut params: Vec<Option<Tensor>> = Vec::new();
        params.resize_with(self.params.len(), || None);

        for i in (0..=ir).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param(id) => accumulate(&mut params[id.0], g),
                op => self.propagate(i, op, &g, &mut grads),
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn propagate(&self, i: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.tensor(i);
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.tensor(a), self.tensor(b));
                if self.rg(a) {
                    // g * b^T
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        for k in 0..tb.rows() {
                            let s: f64 = grow.iter().zip(tb.row(k)).map(|(x, y)| x * y).sum();
                            ga.set(r, k, s);
                        }
                    }
                    accumulate(&mut grads[a], ga);
                }
                if self.rg(b) {
                    // a^T * g
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    matmul_into(&ta.transpose(), g, &mut gb);
                    accumulate(&mut grads[b], gb);
                }
            }
            Op::Transpose(a) => accumulate(&mut grads[a], g.transpose()),
            Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(&mut grads[a], g.clone());
                }
                if self.rg(b) {
                    accumulate(&mut grads[b], g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    accumulate(&mut grads[a], g.zip_map(self.tensor(b), |x, y| x * y));
                }
                if self.rg(b) {
                    accumulate(&mut grads[b], g.zip_map(self.tensor(a), |x, y| x * y));
                }
            }
            Op::Scale(a, k) => accumulate(&mut grads[a], g.map(|x| k * x)),
            Op::SoftmaxVec(a) => {
                let dot: f64 = g.data().iter().zip(out.data()).map(|(x, y)| x * y).sum();
                accumulate(&mut grads[a], out.zip_map(g, |y, gi| y * (gi - dot)));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yi, gi)) in ga.row_mut(r).iter_mut().zip(y.iter().zip(gr)) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(&mut grads[a], ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (ls, gr) = (out.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    for (o, (l, gi)) in ga.row_mut(r).iter_mut().zip(ls.iter().zip(gr)) {
                        *o = gi - l.exp() * gsum;
                    }
                }
                accumulate(&mut grads[a], ga);
            }
            Op::Act(a, kind) => {
                let x = self.tensor(a);
                let mut ga = g.clone();
                for ((o, &xi), &yi) in ga.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                    *o *= kind.derivative(xi, yi);
                }
                accumulate(&mut grads[a], ga);
            }
            Op::ColMax(a, ref arg) => {
                let x = self.tensor(a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (c, &r) in arg.iter().enumerate() {
                    ga.set(r, c, g.get(0, c));
                }
                accumulate(&mut grads[a], ga);
            }
            Op::ColMean(a) | Op::ColSum(a) => {
                let x = self.tensor(a);
                let k = if matches!(op, Op::ColMean(_)) {
                    1.0 / x.rows() as f64
                } else {
                    1.0
                };
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, &gc) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = k * gc;
                    }
                }
                accumulate(&mut grads[a], ga);
            }
            Op::RowMeanScaled(a) => {
                let x = self.tensor(a);
                let k = 1.0 / x.rows() as f64;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let v = k * g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|o| *o = v);
                }
                accumulate(&mut grads[a], ga);
            }
            Op::SumAll(a) => {
                let x = self.tensor(a);
                accumulate(&mut grads[a], Tensor::filled(x.rows(), x.cols(), g.item()));
            }
            Op::RowGather(a, ref idx) => {
                let x = self.tensor(a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &v) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[a], ga);
            }
            Op::RowScale(a, s) => {
                let (x, sv) = (self.tensor(a), self.tensor(s));
                if self.rg(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = sv.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    accumulate(&mut grads[a], ga);
                }
                if self.rg(s) {
                    let gs = (0..x.rows())
                        .map(|r| g.row(r).iter().zip(x.row(r)).map(|(p, q)| p * q).sum())
                        .collect();
                    accumulate(&mut grads[s], Tensor::column(gs));
                }
            }
            Op::ConcatCols(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.tensor(p);
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(t.rows(), t.cols());
                        for r in 0..t.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + t.cols()]);
                        }
                        accumulate(&mut grads[p], gp);
                    }
                    off += t.cols();
                }
            }
            Op::Dropout(a, ref mask) => {
                let mut ga = g.clone();
                for (o, m) in ga.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                accumulate(&mut grads[a], ga);
            }
            Op::CrossEntropy(a, label) => {
                let x = self.tensor(a);
                let mut p = x.clone();
                softmax_in_place(p.data_mut());
                p.data_mut()[label] -= 1.0;
                p.scale_assign(g.item());
                accumulate(&mut grads[a], p);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(sum(exp(x))) - x[label]`, written as `(m - x[label]) + ln(1 + rest)`
/// so that a confident correct prediction keeps full relative precision.
fn cross_entropy_value(xs: &[f64], label: usize) -> f64 {
    let (arg, m) = xs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &x)| if x > am { (i, x) } else { (ai, am) });
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &x)| (x - m).exp())
        .sum();
    (m - xs[label]) + rest.ln_1p()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    let inv = 1.0 / total;
    xs.iter_mut().for_each(|x| *x *= inv);
}
