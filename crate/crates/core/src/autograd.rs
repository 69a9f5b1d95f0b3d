//! A small reverse-mode tape over 2-D matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`]; parameter leaves are views into the
//! store, so building a graph never copies weights. Only trainable parameters
//! (and values derived from them) carry gradients, which keeps backward passes
//! through frozen backbones to activation gradients only.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Normalize { x: Var, rstd: Vec<f64> },
    Softmax { x: Var },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to trainable parameters, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    /// Accumulates `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            *g = g.scaled(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Matrix::is_finite)
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    track: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl<'a> Graph<'a> {
    /// A graph that records operations for a backward pass.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            track: true,
            param_vars: HashMap::new(),
        }
    }

    /// A forward-only graph: nothing requires gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        let requires_grad = self.track && requires_grad;
        // Without a backward pass the recorded op is never read.
        let op = if self.track { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Leaf for a stored parameter. Repeated requests return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.store;
        let v = self.push(
            Cow::Borrowed(store.value(id)),
            Op::Param(id),
            store.is_trainable(id),
        );
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.owned(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.owned(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.owned(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut out = self.value(a).clone();
        let bias = r.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.owned(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "mul_row width");
        let mut out = self.value(a).clone();
        let gain = r.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, g) in out.row_mut(i).iter_mut().zip(&gain) {
                *o *= g;
            }
        }
        self.owned(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.owned(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.owned(out, Op::Gelu(a), &[a])
    }

    /// Per-row standardisation to zero mean, unit variance (layer norm without affine).
    pub fn normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols() as f64;
        let mut out = xv.clone();
        let mut rstds = Vec::with_capacity(xv.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.owned(out, Op::Normalize { x, rstd: rstds }, &[x])
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns `j <= i + (cols - rows)`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + cols).saturating_sub(rows) + 1 } else { cols };
            let limit = limit.min(cols);
            let src = &xv.row(r)[..limit];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out.row_mut(r)[..limit];
            let mut sum = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        self.owned(out, Op::Softmax { x }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_rows(&mats).expect("concat_rows width mismatch");
        self.owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + m.cols()].copy_from_slice(m.row(r));
            }
            c0 += m.cols();
        }
        self.owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_rows(start, end);
        self.owned(out, Op::SliceRows(x, start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.cols(), "column slice out of range");
        let mut out = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        self.owned(out, Op::SliceCols(x, start), &[x])
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.owned(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of `logits`.
    /// Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per logit row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            loss += log_z - row[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        self.owned(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a `1 × 1` output; returns gradients of trainable parameters.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let da = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    if self.requires_grad(*a) {
                        let da = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = g.t_matmul(self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires_grad(*row) {
                        accumulate(&mut grads, *row, g.sum_rows());
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let rv = self.value(*row);
                    if self.requires_grad(*row) {
                        let mut dr = Matrix::zeros(1, rv.cols());
                        for r in 0..g.rows() {
                            for ((d, gv), x) in dr.row_mut(0).iter_mut().zip(g.row(r)).zip(av.row(r)) {
                                *d += gv * x;
                            }
                        }
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.requires_grad(*a) {
                        let mut da = g;
                        let gain = rv.row(0);
                        for r in 0..da.rows() {
                            for (d, s) in da.row_mut(r).iter_mut().zip(gain) {
                                *d *= s;
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scaled(*s));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut da = g;
                    for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                        *d *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Normalize { x, rstd } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = dot(gy, yr) / n;
                        for ((d, gv), yv) in dx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                            *d = rstd[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let mut dx = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner = dot(pr, gr);
                        for ((d, pv), gv) in dx.row_mut(r).iter_mut().zip(pr).zip(gr) {
                            *d = pv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if self.requires_grad(*p) {
                            accumulate(&mut grads, *p, g.slice_rows(r0, r0 + rows));
                        }
                        r0 += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        if self.requires_grad(*p) {
                            let mut dp = Matrix::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                            }
                            accumulate(&mut grads, *p, dp);
                        }
                        c0 += cols;
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, gv) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.get(0, 0);
                    let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for (d, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *d = scale * p;
                        }
                        let cur = dl.get(r, t);
                        dl.set(r, t, cur - scale);
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}
