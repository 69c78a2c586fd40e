//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed on the
//! spot) and [`Graph::backward`] walks the tape in reverse. Parameters live
//! in a [`ParamStore`] and are copied onto the tape by [`ParamStore::bind`],
//! so a graph never aliases mutable model state.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, Rc<[usize]>),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SegmentMean(Var, Rc<[(usize, usize)]>),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var),
    AddN(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Boolean attention mask, row-major `[rows, cols]`; `true` means visible.
#[derive(Clone, Debug)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Rc<[bool]>,
}

impl Mask {
    pub fn causal(n: usize) -> Self {
        let allowed: Vec<bool> = (0..n * n).map(|i| i % n <= i / n).collect();
        Self {
            rows: n,
            cols: n,
            allowed: allowed.into(),
        }
    }

    /// Row `j` sees only the columns inside `spans[j]` (inclusive).
    pub fn spans(spans: &[(usize, usize)], cols: usize) -> Self {
        let mut allowed = vec![false; spans.len() * cols];
        for (j, &(s, e)) in spans.iter().enumerate() {
            for c in s..=e {
                allowed[j * cols + c] = true;
            }
        }
        Self {
            rows: spans.len(),
            cols,
            allowed: allowed.into(),
        }
    }

    fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), [1, 1]);
        m.get(0, 0)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Broadcast-add a `[1, cols]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.row(0).to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(self.value(a).shape(), bv.shape(), "sub shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let [r, c] = bv.shape();
        self.push(Matrix::from_vec(r, c, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(self.value(a).shape(), bv.shape(), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let [r, c] = bv.shape();
        self.push(Matrix::from_vec(r, c, data), Op::Mul(a, b))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let [n, d] = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
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
        )
    }

    /// Row-wise softmax. Masked-out entries are exactly zero and every row
    /// must keep at least one visible entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Var {
        let xv = self.value(x);
        let [n, m] = xv.shape();
        if let Some(mask) = mask {
            assert_eq!([mask.rows, mask.cols], [n, m], "mask shape mismatch");
        }
        let mut out = Matrix::zeros(n, m);
        for r in 0..n {
            let row = xv.row(r);
            let visible = |c: usize| mask.is_none_or(|mk| mk.is_allowed(r, c));
            let max = (0..m)
                .filter(|&c| visible(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max > f64::NEG_INFINITY, "softmax row {r} fully masked");
            let mut total = 0.0;
            let o = out.row_mut(r);
            for c in 0..m {
                if visible(c) {
                    o[c] = (row[c] - max).exp();
                    total += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, m] = xv.shape();
        let mut out = Matrix::zeros(n, m);
        for r in 0..n {
            let row = xv.row(r);
            let lse = log_sum_exp(row);
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Select column `idx[r]` of each row `r`, giving a `[rows, 1]` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), idx.len(), "pick index count mismatch");
        let data = idx.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect();
        self.push(Matrix::from_vec(idx.len(), 1, data), Op::Pick(x, idx.into()))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.data().len() as f64;
        self.push(Matrix::filled(1, 1, s), Op::Mean(x))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut v = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            v.add_assign(self.value(x));
        }
        self.push(v, Op::AddN(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let n = self.value(xs[0]).rows();
        let width: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Matrix::zeros(n, width);
        let mut off = 0;
        for &x in xs {
            let xv = self.value(x);
            assert_eq!(xv.rows(), n, "concat_cols row mismatch");
            for r in 0..n {
                out.row_mut(r)[off..off + xv.cols()].copy_from_slice(xv.row(r));
            }
            off += xv.cols();
        }
        self.push(out, Op::ConcatCols(xs.to_vec()))
    }

    /// Mean of the rows inside each inclusive span.
    pub fn segment_mean(&mut self, x: Var, spans: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Matrix::zeros(spans.len(), d);
        for (j, &(s, e)) in spans.iter().enumerate() {
            let inv = 1.0 / (e - s + 1) as f64;
            let o = out.row_mut(j);
            for t in s..=e {
                for (a, b) in o.iter_mut().zip(xv.row(t)) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a *= inv;
            }
        }
        self.push(out, Op::SegmentMean(x, spans.into()))
    }

    /// Output row `t` is input row `idx[t]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(idx.len(), xv.cols());
        for (t, &i) in idx.iter().enumerate() {
            out.row_mut(t).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::GatherRows(x, idx.into()))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(x))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), [1, 1], "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_t(val(*b)));
                accumulate(grads, *b, val(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.matmul(val(*b)));
                accumulate(grads, *b, g.t_matmul(val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let mut rg = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in rg.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *row, rg);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip_map(g, val(*b), |x, y| x * y));
                accumulate(grads, *b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::Affine(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::Gelu(a) => {
                let d = zip_map(g, val(*a), |gi, x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    gi * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                });
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, &node.value, |x, y| x * y)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let [n, d] = xhat.shape();
                let gam = val(*gamma).row(0);
                let mut dgamma = Matrix::zeros(1, d);
                let mut dbeta = Matrix::zeros(1, d);
                let mut dx = Matrix::zeros(n, d);
                for r in 0..n {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for c in 0..d {
                        dgamma.row_mut(0)[c] += gr[c] * xh[c];
                        dbeta.row_mut(0)[c] += gr[c];
                        let dxh = gr[c] * gam[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[c];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    let out = dx.row_mut(r);
                    for c in 0..d {
                        let dxh = gr[c] * gam[c];
                        out[c] = rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yi, gi)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, (yi, gi)) in dx.row_mut(r).iter_mut().zip(y.row(r).iter().zip(g.row(r))) {
                        *o = gi - yi.exp() * gsum;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Pick(x, idx) => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &c) in idx.iter().enumerate() {
                    dx.set(r, c, g.get(r, 0));
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let [r, c] = val(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(x) => {
                let [r, c] = val(*x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::AddN(xs) => {
                for &x in xs {
                    accumulate(grads, x, g.clone());
                }
            }
            Op::SliceCols(x, start) => {
                let [n, d] = val(*x).shape();
                let mut dx = Matrix::zeros(n, d);
                for r in 0..n {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = val(x).cols();
                    let mut dx = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        dx.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    accumulate(grads, x, dx);
                    off += w;
                }
            }
            Op::SegmentMean(x, spans) => {
                let [n, d] = val(*x).shape();
                let mut dx = Matrix::zeros(n, d);
                for (j, &(s, e)) in spans.iter().enumerate() {
                    let inv = 1.0 / (e - s + 1) as f64;
                    for t in s..=e {
                        for (o, gi) in dx.row_mut(t).iter_mut().zip(g.row(j)) {
                            *o += gi * inv;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherRows(x, idx) => {
                let [n, d] = val(*x).shape();
                let mut dx = Matrix::zeros(n, d);
                for (t, &i) in idx.iter().enumerate() {
                    for (o, gi) in dx.row_mut(i).iter_mut().zip(g.row(t)) {
                        *o += gi;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let [r, c] = val(*x).shape();
                accumulate(grads, *x, g.clone().reshaped(r, c));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter of a bound store; zeros where unused.
    pub fn for_params(&self, bound: &Bound, store: &ParamStore) -> Vec<Matrix> {
        bound
            .vars
            .iter()
            .zip(&store.values)
            .map(|(v, p)| {
                self.wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Copy every parameter onto `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|m| g.leaf(m.clone())).collect(),
        }
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
