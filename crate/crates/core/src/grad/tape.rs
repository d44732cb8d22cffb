use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, sigmoid, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Abs(usize),
    Clip(usize, f64, f64),
    StraightThrough(usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(Vec<(usize, Vec<usize>)>),
    RowMatVec(usize, usize),
    SoftMask {
        len: usize,
        cursors: Vec<usize>,
        gamma: f64,
    },
    Huber {
        pred: usize,
        target: usize,
        delta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Append-only record of a forward computation.
///
/// Inputs always precede outputs, so the graph is acyclic by construction.
/// A tape supports exactly one backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    track: bool,
    consumed: bool,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Elementwise sum with `other`; names missing here are copied.
    pub fn accumulate(&mut self, other: &Gradients) -> crate::Result<()> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(t) if t.shape() == g.shape() => t.add_assign(g),
                Some(t) => {
                    return Err(Error::shape(
                        "accumulate",
                        format!("`{name}`: {:?} vs {:?}", t.shape(), g.shape()),
                    ))
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that records gradients for parameter leaves.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            track: true,
            consumed: false,
        }
    }

    /// A tape whose parameter leaves do not require gradients (inference).
    pub fn inference() -> Self {
        Tape {
            track: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.index()].value
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            param: None,
        });
        Ok(Var { tape: self.id, idx })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn check(&self, op: &'static str, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Tape(format!("{op}: variable does not belong to this tape")));
        }
        Ok(())
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// A named trainable leaf. Gradients are reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        let track = self.track;
        let v = self.push("param", value, Op::Leaf, track)?;
        self.nodes[v.index()].param = Some(name.to_string());
        Ok(v)
    }

    /// Copies the value and cuts the gradient path.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.check("detach", a)?;
        let value = self.value(a).clone();
        self.push("detach", value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a.index(), b.index()), rg)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(op, a)?;
        self.check(op, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a.index(), b.index()), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a.index(), b.index()), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a.index(), b.index()), rg)
    }

    fn broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        want: (Option<usize>, Option<usize>),
        f: impl Fn(f64, f64) -> f64,
        pick: impl Fn(usize, usize, usize) -> usize,
    ) -> Result<Tensor> {
        self.check(op, a)?;
        self.check(op, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = (ta.rows(), ta.cols());
        let rows_ok = want.0.is_none_or(|r| if r == 0 { tb.rows() == m } else { tb.rows() == r });
        let cols_ok = want.1.is_none_or(|c| if c == 0 { tb.cols() == n } else { tb.cols() == c });
        if !rows_ok || !cols_ok {
            return Err(Error::shape(op, format!("{:?} with {:?}", ta.shape(), tb.shape())));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(f(ta.data()[r * n + c], tb.data()[pick(r, c, n)]));
            }
        }
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `[m x n] + [1 x n]`, the bias row broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast("add_row", a, row, (Some(1), Some(0)), |x, y| x + y, |_, c, _| c)?;
        let rg = self.rg(a) || self.rg(row);
        self.push("add_row", out, Op::AddRow(a.index(), row.index()), rg)
    }

    /// `[m x n] * [1 x n]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast("mul_row", a, row, (Some(1), Some(0)), |x, y| x * y, |_, c, _| c)?;
        let rg = self.rg(a) || self.rg(row);
        self.push("mul_row", out, Op::MulRow(a.index(), row.index()), rg)
    }

    /// `[m x n] * [m x 1]`, each row scaled by its own factor.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.broadcast("mul_col", a, col, (Some(0), Some(1)), |x, y| x * y, |r, _, _| r)?;
        let rg = self.rg(a) || self.rg(col);
        self.push("mul_col", out, Op::MulCol(a.index(), col.index()), rg)
    }

    /// Multiplies every entry by a recorded `[1 x 1]` scalar.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check("mul_scalar", a)?;
        self.check("mul_scalar", s)?;
        if !self.value(s).is_scalar() {
            return Err(Error::shape("mul_scalar", format!("{:?} is not scalar", self.value(s).shape())));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).map(|v| v * k);
        let rg = self.rg(a) || self.rg(s);
        self.push("mul_scalar", out, Op::MulScalar(a.index(), s.index()), rg)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check("scale", a)?;
        let out = self.value(a).map(|v| v * k);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a.index(), k), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check("tanh", a)?;
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push("tanh", out, Op::Tanh(a.index()), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check("sigmoid", a)?;
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", out, Op::Sigmoid(a.index()), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check("softmax", a)?;
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("softmax", out, Op::Softmax(a.index()), rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        for &p in parts {
            self.check("concat", p)?;
        }
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(Error::shape("concat", format!("row counts differ: {shapes:?}")));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let idx = parts.iter().map(|p| p.index()).collect();
        self.push("concat", Tensor::matrix(m, total, data), Op::Concat(idx), rg)
    }

    /// Columns `start..end` of every row.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check("slice", a)?;
        let ta = self.value(a);
        let n = ta.cols();
        if start >= end || end > n {
            return Err(Error::shape("slice", format!("{start}..{end} of {:?}", ta.shape())));
        }
        let m = ta.rows();
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push("slice", Tensor::matrix(m, end - start, data), Op::Slice(a.index(), start, end), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check("sum", a)?;
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a.index()), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check("mean", a)?;
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a.index()), rg)
    }

    /// Row sums, `[m x n] -> [m x 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.check("sum_cols", a)?;
        let t = self.value(a);
        let n = t.cols();
        let data: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        self.push("sum_cols", Tensor::column(data), Op::SumCols(a.index()), rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check("abs", a)?;
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push("abs", out, Op::Abs(a.index()), rg)
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.check("clip", a)?;
        if lo > hi {
            return Err(Error::Config(format!("clip bounds {lo} > {hi}")));
        }
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push("clip", out, Op::Clip(a.index(), lo, hi), rg)
    }

    /// Straight-through estimator: the forward value is `hard`, the backward
    /// pass hands the incoming gradient to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        self.check("straight_through", soft)?;
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.value(soft).shape()),
            ));
        }
        let rg = self.rg(soft);
        self.push("straight_through", hard, Op::StraightThrough(soft.index()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check("gather_rows", a)?;
        let ta = self.value(a);
        let m = ta.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let n = ta.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(ta.row_slice(r));
        }
        let rg = self.rg(a);
        self.push(
            "gather_rows",
            Tensor::matrix(rows.len(), n, data),
            Op::GatherRows(a.index(), rows.to_vec()),
            rg,
        )
    }

    /// Places each part's rows at the given destination rows of a zero
    /// `[total x n]` matrix.
    pub fn scatter_rows(&mut self, parts: &[(Var, Vec<usize>)], total: usize) -> Result<Var> {
        let Some((first, _)) = parts.first() else {
            return Err(Error::shape("scatter_rows", "no inputs"));
        };
        self.check("scatter_rows", *first)?;
        let n = self.value(*first).cols();
        let mut data = vec![0.0; total * n];
        for (v, dest) in parts {
            self.check("scatter_rows", *v)?;
            let t = self.value(*v);
            if t.cols() != n || t.rows() != dest.len() || dest.iter().any(|&d| d >= total) {
                return Err(Error::shape(
                    "scatter_rows",
                    format!("{:?} into {} rows of width {n}", t.shape(), total),
                ));
            }
            for (i, &d) in dest.iter().enumerate() {
                data[d * n..(d + 1) * n].copy_from_slice(t.row_slice(i));
            }
        }
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        let op = Op::ScatterRows(parts.iter().map(|(v, d)| (v.index(), d.clone())).collect());
        self.push("scatter_rows", Tensor::matrix(total, n, data), op, rg)
    }

    /// Row-wise matrix-vector product: `mat` rows hold `[a x b]` matrices
    /// flattened row-major, `vec` rows hold length-`b` vectors.
    pub fn row_matvec(&mut self, mat: Var, vec: Var) -> Result<Var> {
        self.check("row_matvec", mat)?;
        self.check("row_matvec", vec)?;
        let (tm, tv) = (self.value(mat), self.value(vec));
        let b = tv.cols();
        if tm.rows() != tv.rows() || b == 0 || tm.cols() % b != 0 {
            return Err(Error::shape("row_matvec", format!("{:?} with {:?}", tm.shape(), tv.shape())));
        }
        let a = tm.cols() / b;
        let m = tm.rows();
        let mut data = vec![0.0; m * a];
        for r in 0..m {
            let mr = tm.row_slice(r);
            let vr = tv.row_slice(r);
            for i in 0..a {
                data[r * a + i] = mr[i * b..(i + 1) * b].iter().zip(vr).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(mat) || self.rg(vec);
        self.push("row_matvec", Tensor::matrix(m, a, data), Op::RowMatVec(mat.index(), vec.index()), rg)
    }

    /// Continuous write mask over a horizon of `horizon` positions.
    ///
    /// `len` is `[m x 1]`; `cursors[r]` is the 1-based first unwritten
    /// position of row `r`. Entry `(r, t-1)` is zero for `t < cursor` and
    /// `sigmoid((len - (t - cursor) - 0.5) / gamma)` otherwise.
    pub fn soft_mask(&mut self, len: Var, cursors: &[usize], horizon: usize, gamma: f64) -> Result<Var> {
        self.check("soft_mask", len)?;
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(Error::Config(format!("mask temperature must be positive, got {gamma}")));
        }
        let tl = self.value(len);
        if tl.cols() != 1 || tl.rows() != cursors.len() {
            return Err(Error::shape(
                "soft_mask",
                format!("lengths {:?} with {} cursors", tl.shape(), cursors.len()),
            ));
        }
        let m = cursors.len();
        let mut data = vec![0.0; m * horizon];
        for (r, &q) in cursors.iter().enumerate() {
            let l = tl.data()[r];
            for t in q.max(1)..=horizon {
                let z = (l - (t - q) as f64 - 0.5) / gamma;
                data[r * horizon + t - 1] = sigmoid(z);
            }
        }
        let rg = self.rg(len);
        let op = Op::SoftMask {
            len: len.index(),
            cursors: cursors.to_vec(),
            gamma,
        };
        self.push("soft_mask", Tensor::matrix(m, horizon, data), op, rg)
    }

    /// Mean Huber loss with threshold `delta`.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        self.check("huber", pred)?;
        self.check("huber", target)?;
        if delta <= 0.0 {
            return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
        }
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::shape("huber", format!("{:?} vs {:?}", tp.shape(), tt.shape())));
        }
        let n = tp.len() as f64;
        let total: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| {
                let r = (p - t).abs();
                if r <= delta {
                    0.5 * r * r
                } else {
                    delta * (r - 0.5 * delta)
                }
            })
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        let op = Op::Huber {
            pred: pred.index(),
            target: target.index(),
            delta,
        };
        self.push("huber", Tensor::scalar(total / n), op, rg)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape's recording:
    /// a second call returns an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called before any forward op".into()));
        }
        self.check("backward", loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let n = loss.index() + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            // keep leaf gradients for collection
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate().take(n) {
            if let (Some(name), Some(g)) = (&node.param, grads[i].take()) {
                match out.map.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.map.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |j: usize| &self.nodes[j].value;
        let with_data = |like: &Tensor, data: Vec<f64>| Tensor::new(like.shape().to_vec(), data).expect("shape");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].requires_grad {
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, with_data(ta, ga));
                }
                if self.nodes[*b].requires_grad {
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, with_data(tb, gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, with_data(ta, ga));
                self.accumulate(grads, *b, with_data(tb, gb));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let n = g.cols();
                let mut gr = vec![0.0; n];
                for r in g.data().chunks(n) {
                    for (acc, v) in gr.iter_mut().zip(r) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *row, with_data(val(*row), gr));
            }
            Op::MulRow(a, row) => {
                let (ta, trow) = (val(*a), val(*row));
                let n = g.cols();
                let mut ga = Vec::with_capacity(g.len());
                let mut gr = vec![0.0; n];
                for (r, grow) in g.data().chunks(n).enumerate() {
                    let arow = ta.row_slice(r);
                    for c in 0..n {
                        ga.push(grow[c] * trow.data()[c]);
                        gr[c] += grow[c] * arow[c];
                    }
                }
                self.accumulate(grads, *a, with_data(ta, ga));
                self.accumulate(grads, *row, with_data(trow, gr));
            }
            Op::MulCol(a, col) => {
                let (ta, tcol) = (val(*a), val(*col));
                let n = g.cols();
                let mut ga = Vec::with_capacity(g.len());
                let mut gc = vec![0.0; tcol.len()];
                for (r, grow) in g.data().chunks(n).enumerate() {
                    let k = tcol.data()[r];
                    let arow = ta.row_slice(r);
                    for c in 0..n {
                        ga.push(grow[c] * k);
                        gc[r] += grow[c] * arow[c];
                    }
                }
                self.accumulate(grads, *a, with_data(ta, ga));
                self.accumulate(grads, *col, with_data(tcol, gc));
            }
            Op::MulScalar(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let k = ts.data()[0];
                self.accumulate(grads, *a, g.map(|v| v * k));
                let gs: f64 = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                self.accumulate(grads, *s, with_data(ts, vec![gs]));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|v| v * k)),
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, with_data(out, d));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, with_data(out, d));
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for (grow, yrow) in g.data().chunks(n).zip(out.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    d.extend(grow.iter().zip(yrow).map(|(x, y)| y * (x - dot)));
                }
                self.accumulate(grads, *a, with_data(out, d));
            }
            Op::Concat(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let w = tp.cols();
                    if self.nodes[p].requires_grad {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, with_data(tp, d));
                    }
                    offset += w;
                }
            }
            Op::Slice(a, start, end) => {
                let ta = val(*a);
                let n = ta.cols();
                let w = end - start;
                let mut d = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    d[r * n + start..r * n + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *a, with_data(ta, d));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let ta = val(*a);
                let gv = g.data()[0] / ta.len() as f64;
                self.accumulate(grads, *a, Tensor::full(ta.shape(), gv));
            }
            Op::SumCols(a) => {
                let ta = val(*a);
                let n = ta.cols();
                let d = (0..ta.len()).map(|k| g.data()[k / n]).collect();
                self.accumulate(grads, *a, with_data(ta, d));
            }
            Op::Abs(a) => {
                let ta = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, with_data(ta, d));
            }
            Op::Clip(a, lo, hi) => {
                let ta = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, x)| if x > lo && x < hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, with_data(ta, d));
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g.clone()),
            Op::GatherRows(a, rows) => {
                let ta = val(*a);
                let n = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        d[r * n + c] += g.data()[i * n + c];
                    }
                }
                self.accumulate(grads, *a, with_data(ta, d));
            }
            Op::ScatterRows(parts) => {
                let n = g.cols();
                for (p, dest) in parts {
                    if !self.nodes[*p].requires_grad {
                        continue;
                    }
                    let mut d = Vec::with_capacity(dest.len() * n);
                    for &r in dest {
                        d.extend_from_slice(g.row_slice(r));
                    }
                    self.accumulate(grads, *p, with_data(val(*p), d));
                }
            }
            Op::RowMatVec(mat, vec) => {
                let (tm, tv) = (val(*mat), val(*vec));
                let b = tv.cols();
                let a = g.cols();
                let mut gm = vec![0.0; tm.len()];
                let mut gv = vec![0.0; tv.len()];
                for r in 0..g.rows() {
                    let mr = tm.row_slice(r);
                    let vr = tv.row_slice(r);
                    for i in 0..a {
                        let gi = g.data()[r * a + i];
                        for j in 0..b {
                            gm[r * a * b + i * b + j] = gi * vr[j];
                            gv[r * b + j] += gi * mr[i * b + j];
                        }
                    }
                }
                self.accumulate(grads, *mat, with_data(tm, gm));
                self.accumulate(grads, *vec, with_data(tv, gv));
            }
            Op::SoftMask { len, cursors, gamma } => {
                let p = out.cols();
                let mut d = vec![0.0; cursors.len()];
                for (r, &q) in cursors.iter().enumerate() {
                    for t in q.max(1)..=p {
                        let m = out.data()[r * p + t - 1];
                        d[r] += g.data()[r * p + t - 1] * m * (1.0 - m) / gamma;
                    }
                }
                self.accumulate(grads, *len, with_data(val(*len), d));
            }
            Op::Huber { pred, target, delta } => {
                let (tp, tt) = (val(*pred), val(*target));
                let scale = g.data()[0] / tp.len() as f64;
                let d: Vec<f64> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(p, t)| (p - t).clamp(-delta, *delta) * scale)
                    .collect();
                let neg = d.iter().map(|v| -v).collect();
                self.accumulate(grads, *pred, with_data(tp, d));
                self.accumulate(grads, *target, with_data(tt, neg));
            }
        }
    }
}
