//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every forward computation in the model is recorded on a [`Tape`] as a
//! sequence of matrix operations. [`Tape::backward`] walks the tape in
//! reverse and accumulates exact gradients for every registered parameter.
//!
//! ```
//! use rul_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(0, &Tensor::row(vec![2.0, -1.0]));
//! let x = tape.constant(Tensor::row(vec![3.0, 4.0]));
//! let y = tape.mul(w, x);
//! let loss = tape.sum(y);
//! assert_eq!(tape.scalar(loss), 2.0);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(0).unwrap().data(), &[3.0, 4.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::new(1, cols, data)
    }

    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self::new(rows, 1, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var, f64),
    SoftmaxRows(Var),
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    MeanRows(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Pick(Var, usize),
    ScatterCols(Var, Vec<usize>),
    KlConst(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients with respect to registered parameters, keyed by parameter id.
#[derive(Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: usize) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Floor applied inside `log` and KL terms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Records operations for a single forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
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

    /// Drops every node recorded at or after position `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        for p in self.params.iter_mut() {
            if matches!(p, Some(v) if v.0 >= len) {
                *p = None;
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data[0]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers parameter `id`. Registering the same id twice returns the
    /// first node, so gradients accumulate in one place.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(Some(v)) = self.params.get(id) {
            return *v;
        }
        let var = self.push(value.clone(), Op::Param(id));
        if self.params.len() <= id {
            self.params.resize(id + 1, None);
        }
        self.params[id] = Some(var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul shape mismatch");
        let out = matmul(x, y);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_nt shape mismatch");
        let out = matmul_nt(x, y);
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, Op::Add(a, b))
    }

    /// Adds the 1×n row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        assert_eq!(x.cols, r.cols, "add_row shape mismatch");
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * k).collect());
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * k).collect());
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v + k).collect());
        self.push(out, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v.tanh()).collect());
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| sigmoid(v)).collect());
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v.exp()).collect());
        self.push(out, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v.max(floor).ln()).collect());
        self.push(out, Op::Log(a, floor))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            assert!(i < t.rows, "gather index {i} out of range {}", t.rows);
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(idx.len(), t.cols, data);
        self.push(out, Op::Gather(table, idx.to_vec()))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.rows, "slice_rows out of range");
        let out = Tensor::new(
            end - start,
            x.cols,
            x.data[start * x.cols..end * x.cols].to_vec(),
        );
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn row_of(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, r + 1)
    }

    /// Mean over rows, giving a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = vec![0.0; x.cols];
        for row in x.data.chunks(x.cols) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let n = x.rows as f64;
        data.iter_mut().for_each(|d| *d /= n);
        self.push(Tensor::row(data), Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row_slice(r));
            }
        }
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose(self.value(a));
        self.push(out, Op::Transpose(a))
    }

    /// Entry `i` (row-major) of `a` as a 1×1 node.
    pub fn pick(&mut self, a: Var, i: usize) -> Var {
        let v = self.value(a).data[i];
        self.push(Tensor::scalar(v), Op::Pick(a, i))
    }

    /// Scatters the 1×n row `a` into a 1×`width` row, summing entries that
    /// share a target column.
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], width: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, 1);
        assert_eq!(x.cols, idx.len());
        let mut data = vec![0.0; width];
        for (&j, v) in idx.iter().zip(&x.data) {
            data[j] += v;
        }
        self.push(Tensor::row(data), Op::ScatterCols(a, idx.to_vec()))
    }

    /// `Σ_v p_v ln(p_v / max(q_v, LOG_FLOOR))` for a 1×n distribution node `p`
    /// against a constant distribution `q`. Terms with `p_v = 0` contribute 0.
    pub fn kl_const(&mut self, p: Var, q: &[f64]) -> Var {
        let x = self.value(p);
        assert_eq!(x.len(), q.len());
        let v = kl_terms(&x.data, q);
        self.push(Tensor::scalar(v), Op::KlConst(p, q.to_vec()))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "gradient requested for a node that was never recorded".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let mut out = ParamGrads::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if out.grads.len() <= *id {
                        out.grads.resize(*id + 1, None);
                    }
                    out.grads[*id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, matmul_nt(&g, y));
                    accumulate(&mut grads, *b, matmul_tn(x, &g));
                }
                Op::MatMulNt(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, matmul(&g, y));
                    accumulate(&mut grads, *b, matmul_tn(&g, x));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut rg = vec![0.0; g.cols];
                    for chunk in g.data.chunks(g.cols) {
                        for (r, v) in rg.iter_mut().zip(chunk) {
                            *r += v;
                        }
                    }
                    accumulate(&mut grads, *row, Tensor::row(rg));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let neg = map(&g, |v| -v);
                    accumulate(&mut grads, *b, neg);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, zip(&g, y, |p, q| p * q));
                    accumulate(&mut grads, *b, zip(&g, x, |p, q| p * q));
                }
                Op::MulScalar(a, s) => {
                    let k = self.scalar(*s);
                    let x = self.value(*a);
                    let ds: f64 = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                    accumulate(&mut grads, *s, Tensor::scalar(ds));
                    accumulate(&mut grads, *a, map(&g, |v| v * k));
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads, *a, map(&g, |v| v * k));
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip(&g, y, |p, t| p * (1.0 - t * t)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip(&g, y, |p, s| p * s * (1.0 - s)));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip(&g, y, |p, e| p * e));
                }
                Op::Log(a, floor) => {
                    let x = self.value(*a);
                    let f = *floor;
                    accumulate(
                        &mut grads,
                        *a,
                        zip(&g, x, |p, v| if v > f { p / v } else { 0.0 }),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (drow, yrow) in dx.data.chunks_mut(y.cols).zip(y.data.chunks(y.cols)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, s)| d * s).sum();
                        for (d, s) in drow.iter_mut().zip(yrow) {
                            *d = s * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Gather(table, idx) => {
                    let t = self.value(*table);
                    let mut dt = Tensor::zeros(t.rows, t.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        let src = g.row_slice(r);
                        let dst = &mut dt.data[i * t.cols..(i + 1) * t.cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    let off = start * x.cols;
                    dx.data[off..off + g.data.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, dx);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows as f64;
                    let mut data = Vec::with_capacity(x.len());
                    for _ in 0..x.rows {
                        data.extend(g.data.iter().map(|v| v / n));
                    }
                    accumulate(&mut grads, *a, Tensor::new(x.rows, x.cols, data));
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    let k = g.data[0];
                    accumulate(&mut grads, *a, Tensor::new(x.rows, x.cols, vec![k; x.len()]));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let mut data = Vec::with_capacity(t.len());
                        for r in 0..t.rows {
                            let row = g.row_slice(r);
                            data.extend_from_slice(&row[off..off + t.cols]);
                        }
                        off += t.cols;
                        accumulate(&mut grads, p, Tensor::new(t.rows, t.cols, data));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let n = t.len();
                        accumulate(
                            &mut grads,
                            p,
                            Tensor::new(t.rows, t.cols, g.data[off..off + n].to_vec()),
                        );
                        off += n;
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, transpose(&g)),
                Op::Pick(a, i) => {
                    let x = self.value(*a);
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    dx.data[*i] = g.data[0];
                    accumulate(&mut grads, *a, dx);
                }
                Op::ScatterCols(a, idx) => {
                    let data = idx.iter().map(|&j| g.data[j]).collect();
                    accumulate(&mut grads, *a, Tensor::row(data));
                }
                Op::KlConst(p, q) => {
                    let x = self.value(*p);
                    let k = g.data[0];
                    let data = x
                        .data
                        .iter()
                        .zip(q)
                        .map(|(&pv, &qv)| {
                            if pv > 0.0 {
                                k * ((pv / qv.max(LOG_FLOOR)).ln() + 1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, Tensor::new(x.rows, x.cols, data));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.rows, t.cols, t.data.iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&p, &q)| f(p, q)).collect(),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(LOG_FLOOR)).ln())
        .sum()
}

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

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(m, n, out)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(m, n, out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.len()];
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    Tensor::new(a.cols, a.rows, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut hi = x.clone();
                hi.data[i] += eps;
                let mut lo = x.clone();
                lo.data[i] -= eps;
                (f(&hi) - f(&lo)) / (2.0 * eps)
            })
            .collect()
    }

    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.param(0, t);
            let out = build(&mut tape, v);
            tape.scalar(out)
        };
        let mut tape = Tape::new();
        let v = tape.param(0, &x);
        let out = build(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(0).unwrap().data().to_vec();
        let numeric = numeric(&x, eval);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(rows, cols, data)
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = sample(3, 4, 1);
        let b = sample(4, 5, 2);
        let c = matmul(&a, &b);
        let c2 = matmul_nt(&a, &transpose(&b));
        let c3 = matmul_tn(&transpose(&a), &b);
        assert!(c.max_abs_diff(&c2) < 1e-14);
        assert!(c.max_abs_diff(&c3) < 1e-14);
        assert!((c.get(1, 2) - (0..4).map(|p| a.get(1, p) * b.get(p, 2)).sum::<f64>()).abs() < 1e-14);
    }

    #[test]
    fn matmul_gradients() {
        let w = sample(4, 3, 3);
        check(sample(2, 4, 4), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv);
            let y = t.tanh(y);
            t.sum(y)
        });
        let w = sample(5, 4, 5);
        check(sample(2, 4, 6), |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul_nt(x, wv);
            let y = t.sigmoid(y);
            t.sum(y)
        });
        let x0 = sample(3, 4, 7);
        check(sample(5, 4, 8), |t, w| {
            let xv = t.constant(x0.clone());
            let y = t.matmul_nt(xv, w);
            let y = t.mul(y, y);
            t.sum(y)
        });
    }

    #[test]
    fn softmax_and_log_gradients() {
        let target = sample(2, 5, 9);
        check(sample(2, 5, 10), |t, x| {
            let s = t.softmax_rows(x);
            let l = t.log(s, LOG_FLOOR);
            let c = t.constant(target.clone());
            let y = t.mul(l, c);
            t.sum(y)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let c = sample(1, 3, 11);
        check(sample(4, 3, 12), |t, x| {
            let a = t.slice_rows(x, 1, 3);
            let m = t.mean_rows(a);
            let r = t.row_of(x, 0);
            let cat = t.concat_cols(&[m, r]);
            let tr = t.transpose(cat);
            let rows = t.concat_rows(&[tr, tr]);
            let cv = t.constant(c.clone());
            let ar = t.add_row(x, cv);
            let e = t.exp(ar);
            let s1 = t.sum(e);
            let s2 = t.sum(rows);
            let p = t.pick(x, 5);
            let prod = t.mul_scalar(rows, p);
            let s3 = t.sum(prod);
            let a = t.add(s1, s2);
            let a = t.sub(a, s3);
            let a = t.scale(a, 0.5);
            t.add_const(a, 3.0)
        });
    }

    #[test]
    fn gather_scatter_and_kl_gradients() {
        let q = vec![0.1, 0.2, 0.3, 0.25, 0.15];
        check(sample(6, 3, 13), |t, table| {
            let g = t.gather(table, &[1, 4, 1]);
            let m = t.mean_rows(g);
            let s = t.softmax_rows(m);
            let sc = t.scatter_cols(s, &[0, 3, 3], 5);
            let p = t.add_const(sc, 0.0);
            t.kl_const(p, &q)
        });
    }

    #[test]
    fn repeated_param_registration_shares_node() {
        let mut tape = Tape::new();
        let w = Tensor::row(vec![1.0, 2.0]);
        let a = tape.param(3, &w);
        let b = tape.param(3, &w);
        assert_eq!(a, b);
        let y = tape.mul(a, b);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(3).unwrap().data(), &[2.0, 4.0]);
        assert!(g.get(0).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let empty = Tape::new();
        assert!(matches!(empty.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row(vec![0.2, 0.8, 0.0]));
        let k = tape.kl_const(p, &[0.2, 0.8, 0.0]);
        assert_eq!(tape.scalar(k), 0.0);
    }
}
