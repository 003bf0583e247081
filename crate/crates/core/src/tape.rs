//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every differentiable call appends a node holding its output value. A
//! backward pass walks the nodes in exact reverse order, accumulating
//! adjoints, and finally adds the adjoints of parameter leaves into the
//! owning [`ParamStore`]. A tape supports one backward pass.

use std::collections::HashMap;

use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, log_softmax_in_place, sigmoid, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var },
    Affine { a: Var, alpha: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    ScaleRows { a: Var, scales: Vec<f64> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    ShiftRows { a: Var, k: usize },
    LogSoftmaxRows(Var),
    PickCols { a: Var, idx: Vec<usize> },
    ScatterAdd { base: Var, part: Var, idx: Vec<usize> },
    LstmCell { gates: Var, c: Var },
    QrnnPool { gates: Var, c0: Var, batch: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Adjoints of every node after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()))
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn shape2(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Non-parameter input; its adjoint is available through [`Gradients`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter once per tape; repeated calls share the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).zip(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `[m × n]` value.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match rows of {:?}",
                self.value(bias).shape(),
                self.value(a).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddBias { a, bias }))
    }

    /// `alpha·a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let out = self.value(a).map(move |x| alpha * x + beta);
        self.push(out, Op::Affine { a, alpha })
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, e) = dims2(t);
        if ids.is_empty() {
            return Err(Error::Dimension("gather with no indices".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, vocab: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(shape2(ids.len(), e), data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Multiplies row `r` by the constant `scales[r]`.
    pub fn scale_rows(&mut self, a: Var, scales: Vec<f64>) -> Result<Var> {
        let mut out = self.value(a).clone();
        if scales.len() != out.rows() {
            return Err(Error::Dimension(format!(
                "{} row scales for {:?}",
                scales.len(),
                out.shape()
            )));
        }
        for (r, &s) in scales.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.push(out, Op::ScaleRows { a, scales }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = dims2(t);
        if start >= end || end > rows {
            return Err(Error::Dimension(format!("row slice {start}..{end} of {:?}", t.shape())));
        }
        let data = t.data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(shape2(end - start, cols), data)?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = dims2(t);
        if start >= end || end > cols {
            return Err(Error::Dimension(format!("column slice {start}..{end} of {:?}", t.shape())));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::new(shape2(rows, end - start), data)?;
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::Dimension("concat of zero parts".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch: {cols} vs {:?}",
                    t.shape()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(shape2(rows, cols), data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, ca) = dims2(ta);
        let (rb, cb) = dims2(tb);
        if rows != rb {
            return Err(Error::Dimension(format!(
                "concat_cols row mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(shape2(rows, ca + cb), data)?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Output row `r` is input row `r - k`; the first `k` rows are zero.
    pub fn shift_rows(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let (rows, cols) = dims2(t);
        let mut out = Tensor::zeros(shape2(rows, cols));
        if k < rows {
            out.data_mut()[k * cols..].copy_from_slice(&t.data()[..(rows - k) * cols]);
        }
        self.push(out, Op::ShiftRows { a, k })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            log_softmax_in_place(row);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = dims2(t);
        if idx.len() != rows {
            return Err(Error::Dimension(format!("{} picks for {rows} rows", idx.len())));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::Vocabulary { id: c, vocab: cols });
            }
            data.push(t.at(r, c));
        }
        let out = Tensor::vector(data)?;
        Ok(self.push(out, Op::PickCols { a, idx: idx.to_vec() }))
    }

    /// `out = base; out[idx[i]] += part[i]`.
    pub fn scatter_add(&mut self, base: Var, part: Var, idx: &[usize]) -> Result<Var> {
        let mut out = self.value(base).clone();
        let p = self.value(part);
        if p.len() != idx.len() {
            return Err(Error::Dimension(format!("{} values for {} indices", p.len(), idx.len())));
        }
        for (&i, &x) in idx.iter().zip(p.data()) {
            if i >= out.len() {
                return Err(Error::Dimension(format!("scatter index {i} out of {}", out.len())));
            }
            out.data_mut()[i] += x;
        }
        Ok(self.push(out, Op::ScatterAdd { base, part, idx: idx.to_vec() }))
    }

    /// Fused LSTM pointwise step.
    ///
    /// `gates` is `[B × 4h]` of pre-activations ordered (i, f, g, o) and `c`
    /// is `[B × h]`. Returns `[B × 2h]` holding `[h' | c']`.
    pub fn lstm_cell(&mut self, gates: Var, c: Var) -> Result<Var> {
        let (g, cv) = (self.value(gates), self.value(c));
        let (b, h) = dims2(cv);
        if dims2(g) != (b, 4 * h) {
            return Err(Error::Dimension(format!(
                "lstm gates {:?} do not match cell state {:?}",
                g.shape(),
                cv.shape()
            )));
        }
        let mut out = Tensor::zeros(shape2(b, 2 * h));
        for r in 0..b {
            let gr = g.row(r);
            let cr = cv.row(r);
            let or = out.row_mut(r);
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let cand = gr[2 * h + j].tanh();
                let o = sigmoid(gr[3 * h + j]);
                let cn = f * cr[j] + i * cand;
                or[h + j] = cn;
                or[j] = o * cn.tanh();
            }
        }
        Ok(self.push(out, Op::LstmCell { gates, c }))
    }

    /// Fused QRNN fo-pooling over a whole window.
    ///
    /// `gates` is `[T·B × 3h]` of pre-activations ordered (z, f, o), rows
    /// time-major; `c0` is `[B × h]`. Returns `[T·B × 2h]` holding `[h_t | c_t]`
    /// with `c_t = f_t⊙c_{t−1} + (1−f_t)⊙z_t` and `h_t = o_t⊙c_t`.
    pub fn qrnn_pool(&mut self, gates: Var, c0: Var) -> Result<Var> {
        let (g, c0v) = (self.value(gates), self.value(c0));
        let (b, h) = dims2(c0v);
        let (rows, gc) = dims2(g);
        if gc != 3 * h || rows % b != 0 {
            return Err(Error::Dimension(format!(
                "qrnn gates {:?} do not match state {:?}",
                g.shape(),
                c0v.shape()
            )));
        }
        let mut out = Tensor::zeros(shape2(rows, 2 * h));
        let mut prev = c0v.data().to_vec();
        let steps = rows / b;
        for t in 0..steps {
            for bi in 0..b {
                let r = t * b + bi;
                let gr = g.row(r);
                let pr = &mut prev[bi * h..(bi + 1) * h];
                let or = out.row_mut(r);
                for j in 0..h {
                    let z = gr[j].tanh();
                    let f = sigmoid(gr[h + j]);
                    let o = sigmoid(gr[2 * h + j]);
                    let c = f * pr[j] + (1.0 - f) * z;
                    pr[j] = c;
                    or[h + j] = c;
                    or[j] = o * c;
                }
            }
        }
        Ok(self.push(out, Op::QrnnPool { gates, c0, batch: b }))
    }

    /// Runs the reverse sweep from a scalar `loss` and returns every adjoint.
    pub fn gradients(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Accumulates `∂loss/∂param` into every reachable parameter's grad.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_scaled(g, 1.0);
            }
        }
        Ok(grads)
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (val(a), val(b));
                if ta {
                    gemm_acc(bv, tb, g, true, slot!(a), 1.0);
                } else {
                    gemm_acc(g, false, bv, !tb, slot!(a), 1.0);
                }
                if tb {
                    gemm_acc(g, true, av, ta, slot!(b), 1.0);
                } else {
                    gemm_acc(av, !ta, g, false, slot!(b), 1.0);
                }
            }
            Op::Add(a, b) => {
                slot!(*a).add_scaled(g, 1.0);
                slot!(*b).add_scaled(g, 1.0);
            }
            Op::Sub(a, b) => {
                slot!(*a).add_scaled(g, 1.0);
                slot!(*b).add_scaled(g, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let gb = g.zip(val(b), |x, y| x * y).expect("shapes checked in forward");
                let ga = g.zip(val(a), |x, y| x * y).expect("shapes checked in forward");
                slot!(a).add_scaled(&gb, 1.0);
                slot!(b).add_scaled(&ga, 1.0);
            }
            Op::AddBias { a, bias } => {
                slot!(*a).add_scaled(g, 1.0);
                let n = g.cols();
                let gb = slot!(*bias).data_mut();
                for row in g.data().chunks(n) {
                    for (s, &x) in gb.iter_mut().zip(row) {
                        *s += x;
                    }
                }
            }
            Op::Affine { a, alpha } => slot!(*a).add_scaled(g, *alpha),
            Op::Sigmoid(a) => {
                let d = g.zip(&node.value, |gx, y| gx * y * (1.0 - y)).unwrap();
                slot!(*a).add_scaled(&d, 1.0);
            }
            Op::Tanh(a) => {
                let d = g.zip(&node.value, |gx, y| gx * (1.0 - y * y)).unwrap();
                slot!(*a).add_scaled(&d, 1.0);
            }
            Op::Sum(a) => {
                let s = g.item();
                slot!(*a).data_mut().iter_mut().for_each(|x| *x += s);
            }
            Op::Mean(a) => {
                let s = g.item() / val(*a).len() as f64;
                slot!(*a).data_mut().iter_mut().for_each(|x| *x += s);
            }
            Op::Reshape(a) => {
                let d = slot!(*a).data_mut();
                for (x, &y) in d.iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            Op::Gather { table, ids } => {
                let t = slot!(*table);
                for (i, &id) in ids.iter().enumerate() {
                    for (x, &y) in t.row_mut(id).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
            }
            Op::ScaleRows { a, scales } => {
                let t = slot!(*a);
                for (r, &s) in scales.iter().enumerate() {
                    if s != 0.0 {
                        for (x, &y) in t.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += s * y;
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let t = slot!(*a);
                let off = start * t.cols();
                for (x, &y) in t.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            Op::SliceCols { a, start } => {
                let t = slot!(*a);
                let w = g.cols();
                for r in 0..g.rows() {
                    for (x, &y) in t.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = slot!(p);
                    let len = t.len();
                    for (x, &y) in t.data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                        *x += y;
                    }
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let ta = slot!(*a);
                for r in 0..g.rows() {
                    for (x, &y) in ta.row_mut(r).iter_mut().zip(&g.row(r)[..ca]) {
                        *x += y;
                    }
                }
                let tb = slot!(*b);
                for r in 0..g.rows() {
                    for (x, &y) in tb.row_mut(r).iter_mut().zip(&g.row(r)[ca..]) {
                        *x += y;
                    }
                }
            }
            Op::ShiftRows { a, k } => {
                let t = slot!(*a);
                let cols = t.cols();
                let rows = t.rows();
                if *k < rows {
                    let n = (rows - k) * cols;
                    for (x, &y) in t.data_mut()[..n].iter_mut().zip(&g.data()[k * cols..]) {
                        *x += y;
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let cols = g.cols();
                let t = slot!(*a);
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let yr = node.value.row(r);
                    let total: f64 = gr.iter().sum();
                    for ((x, &gy), &y) in t.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *x += gy - y.exp() * total;
                    }
                }
                debug_assert_eq!(cols, node.value.cols());
            }
            Op::PickCols { a, idx } => {
                let t = slot!(*a);
                let cols = t.cols();
                for (r, &c) in idx.iter().enumerate() {
                    t.data_mut()[r * cols + c] += g.data()[r];
                }
            }
            Op::ScatterAdd { base, part, idx } => {
                slot!(*base).add_scaled(g, 1.0);
                let p = slot!(*part);
                for (x, &i) in p.data_mut().iter_mut().zip(idx) {
                    *x += g.data()[i];
                }
            }
            Op::LstmCell { gates, c } => {
                let (gv, cv) = (val(*gates), val(*c));
                let (b, h) = dims2(cv);
                let mut dg = Tensor::zeros(gv.shape().to_vec());
                let mut dc = Tensor::zeros(cv.shape().to_vec());
                for r in 0..b {
                    let gr = gv.row(r);
                    let cr = cv.row(r);
                    let outr = node.value.row(r);
                    let grow = g.row(r);
                    let dgr = dg.row_mut(r);
                    for j in 0..h {
                        let i = sigmoid(gr[j]);
                        let f = sigmoid(gr[h + j]);
                        let cand = gr[2 * h + j].tanh();
                        let o = sigmoid(gr[3 * h + j]);
                        let tc = outr[h + j].tanh();
                        let dh = grow[j];
                        let dcn = grow[h + j] + dh * o * (1.0 - tc * tc);
                        dgr[j] = dcn * cand * i * (1.0 - i);
                        dgr[h + j] = dcn * cr[j] * f * (1.0 - f);
                        dgr[2 * h + j] = dcn * i * (1.0 - cand * cand);
                        dgr[3 * h + j] = dh * tc * o * (1.0 - o);
                        dc.row_mut(r)[j] = dcn * f;
                    }
                }
                slot!(*gates).add_scaled(&dg, 1.0);
                slot!(*c).add_scaled(&dc, 1.0);
            }
            Op::QrnnPool { gates, c0, batch } => {
                let (gv, c0v) = (val(*gates), val(*c0));
                let b = *batch;
                let h = c0v.cols();
                let steps = gv.rows() / b;
                let mut dg = Tensor::zeros(gv.shape().to_vec());
                let mut carry = vec![0.0; b * h];
                for t in (0..steps).rev() {
                    for bi in 0..b {
                        let r = t * b + bi;
                        let gr = gv.row(r);
                        let outr = node.value.row(r);
                        let prev = if t == 0 {
                            c0v.row(bi)
                        } else {
                            &node.value.row(r - b)[h..]
                        };
                        let grow = g.row(r);
                        let cr = &mut carry[bi * h..(bi + 1) * h];
                        let dgr = dg.row_mut(r);
                        for j in 0..h {
                            let z = gr[j].tanh();
                            let f = sigmoid(gr[h + j]);
                            let o = sigmoid(gr[2 * h + j]);
                            let c = outr[h + j];
                            let dh = grow[j];
                            let dc = grow[h + j] + dh * o + cr[j];
                            dgr[j] = dc * (1.0 - f) * (1.0 - z * z);
                            dgr[h + j] = dc * (prev[j] - z) * f * (1.0 - f);
                            dgr[2 * h + j] = dh * c * o * (1.0 - o);
                            cr[j] = dc * f;
                        }
                    }
                }
                slot!(*gates).add_scaled(&dg, 1.0);
                let dc0 = Tensor::new(c0v.shape().to_vec(), carry).unwrap();
                slot!(*c0).add_scaled(&dc0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::rng::Rng;
    use proptest::prelude::*;

    const STEP: f64 = 1e-4;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape.to_vec(), 1.0, &mut Rng::seed_from(seed))
    }

    /// Weighted sum so every output entry gets a distinct adjoint.
    fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let w = rand_t(tape.value(v).shape(), seed ^ 0x5eed);
        let w = tape.leaf(w);
        let p = tape.mul(v, w)?;
        Ok(tape.sum(p))
    }

    fn check<F>(shape: &[usize], f: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let x = rand_t(shape, 42);
        finite_diff_check(|t, v| {
            let out = f(t, v)?;
            weighted_sum(t, out, 9)
        }, &x, STEP)
        .unwrap()
    }

    #[test]
    fn matmul_gradients_both_sides() {
        let b = rand_t(&[7, 3], 1);
        let a = rand_t(&[5, 7], 2);
        let err_a = check(&[5, 7], |t, x| {
            let bv = t.leaf(b.clone());
            t.matmul(x, bv)
        });
        let err_b = check(&[7, 3], |t, x| {
            let av = t.leaf(a.clone());
            t.matmul(av, x)
        });
        assert!(err_a < 1e-5 && err_b < 1e-5, "{err_a} {err_b}");
    }

    #[test]
    fn transposed_matmul_gradients() {
        let other = rand_t(&[4, 6], 3);
        for (ta, tb) in [(true, false), (false, true), (true, true)] {
            let xs = if ta { [6, 3] } else { [3, 6] };
            let err = check(&xs, |t, x| {
                let o = t.leaf(other.clone());
                // op(x) is 3×6, op(o) must be 6×4.
                t.matmul_t(x, ta, o, !tb)
                    .or_else(|_| t.matmul_t(x, ta, o, tb))
            });
            assert!(err < 1e-5, "ta={ta} tb={tb}: {err}");
            let err = check(&[4, 6], |t, x| {
                let y = t.leaf(rand_t(&[6, 3], 8));
                t.matmul_t(x, false, y, false)?;
                let y2 = t.leaf(rand_t(&[3, 6], 8));
                t.matmul_t(x, false, y2, true)
            });
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn pointwise_gradients() {
        let other = rand_t(&[3, 4], 5);
        let ops: Vec<Box<dyn Fn(&mut Tape, Var) -> Result<Var>>> = vec![
            Box::new(|t, x| Ok(t.sigmoid(x))),
            Box::new(|t, x| Ok(t.tanh(x))),
            Box::new(|t, x| Ok(t.affine(x, -2.5, 0.3))),
            Box::new(|t, x| t.mul(x, x)),
            Box::new(move |t, x| {
                let o = t.leaf(other.clone());
                let a = t.add(x, o)?;
                let s = t.sub(o, x)?;
                t.mul(a, s)
            }),
        ];
        for (i, op) in ops.iter().enumerate() {
            let err = check(&[3, 4], op);
            assert!(err < 1e-5, "op {i}: {err}");
        }
    }

    #[test]
    fn structural_gradients() {
        let bias = rand_t(&[4], 6);
        let cases: Vec<Box<dyn Fn(&mut Tape, Var) -> Result<Var>>> = vec![
            Box::new(move |t, x| {
                let b = t.leaf(bias.clone());
                t.add_bias(x, b)
            }),
            Box::new(|t, x| t.gather(x, &[2, 0, 2, 1])),
            Box::new(|t, x| t.scale_rows(x, vec![0.0, 2.0, -1.0])),
            Box::new(|t, x| t.slice_rows(x, 1, 3)),
            Box::new(|t, x| t.slice_cols(x, 1, 3)),
            Box::new(|t, x| {
                let a = t.slice_rows(x, 0, 1)?;
                t.concat_rows(&[x, a, x])
            }),
            Box::new(|t, x| t.concat_cols(x, x)),
            Box::new(|t, x| Ok(t.shift_rows(x, 1))),
            Box::new(|t, x| Ok(t.log_softmax_rows(x))),
            Box::new(|t, x| t.pick_cols(x, &[3, 0, 1])),
            Box::new(|t, x| {
                let p = t.pick_cols(x, &[3, 0, 1])?;
                let flat = t.reshape(x, [12])?;
                t.scatter_add(flat, p, &[0, 0, 11])
            }),
            Box::new(|t, x| Ok(t.mean(x))),
        ];
        for (i, op) in cases.iter().enumerate() {
            let err = check(&[3, 4], op);
            assert!(err < 1e-5, "case {i}: {err}");
        }
    }

    #[test]
    fn fused_lstm_cell_gradients() {
        let c = rand_t(&[2, 3], 7);
        let gates = rand_t(&[2, 12], 8);
        let err_g = check(&[2, 12], |t, g| {
            let cv = t.leaf(c.clone());
            t.lstm_cell(g, cv)
        });
        let err_c = check(&[2, 3], |t, cv| {
            let g = t.leaf(gates.clone());
            t.lstm_cell(g, cv)
        });
        assert!(err_g < 1e-5 && err_c < 1e-5, "{err_g} {err_c}");
    }

    #[test]
    fn fused_qrnn_pool_gradients() {
        let c0 = rand_t(&[2, 3], 7);
        let gates = rand_t(&[10, 9], 8);
        let err_g = check(&[10, 9], |t, g| {
            let cv = t.leaf(c0.clone());
            t.qrnn_pool(g, cv)
        });
        let err_c = check(&[2, 3], |t, cv| {
            let g = t.leaf(gates.clone());
            t.qrnn_pool(g, cv)
        });
        assert!(err_g < 1e-5 && err_c < 1e-5, "{err_g} {err_c}");
    }

    #[test]
    fn sum_of_param_gives_ones() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_t(&[3, 2], 1));
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let loss = tape.sum(v);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(w).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_times_anything_gives_zero_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_t(&[3, 2], 1));
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let s = tape.sigmoid(v);
        let z = tape.scale(s, 0.0);
        let loss = tape.sum(z);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(w).data().iter().all(|&g| g == 0.0));
    }

    fn tanh_loss(store: &mut ParamStore, w: ParamId) {
        let mut tape = Tape::new();
        let v = tape.param(store, w);
        let s = tape.tanh(v);
        let sq = tape.mul(s, s).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, store).unwrap();
    }

    #[test]
    fn two_passes_double_the_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_t(&[4, 4], 1));
        tanh_loss(&mut store, w);
        let once = store.grad(w).clone();
        tanh_loss(&mut store, w);
        for (a, b) in store.grad(w).data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        store.zero_grads();
        assert!(store.grad(w).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_loss_and_reuse_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2, 2]));
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.gradients(s).unwrap();
        assert!(matches!(tape.gradients(s), Err(Error::TapeReused)));
    }

    #[test]
    fn shared_param_node_collects_both_uses() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[2.0, 4.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn matmul_chain_gradients_sound(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
            let b = rand_t(&[k, n], seed);
            let x = rand_t(&[m, k], seed + 1);
            let err = finite_diff_check(|t, v| {
                let bv = t.leaf(b.clone());
                let p = t.matmul(v, bv)?;
                let s = t.tanh(p);
                let l = t.log_softmax_rows(s);
                weighted_sum(t, l, seed)
            }, &x, STEP).unwrap();
            prop_assert!(err < 1e-4, "err {}", err);
        }
    }
}
