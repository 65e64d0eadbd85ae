//! Reverse-mode differentiation over a linear tape of matrix operations.

use super::matrix::{dot, Matrix};
use super::params::{Gradients, ParamId, ParamStore};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sum(Vec<Var>),
    Affine(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    PoolRows(Var, Vec<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Pick(Var, Vec<(usize, usize, f64)>),
    MixRows {
        beta: Var,
        shared: Var,
        rows: Var,
    },
    Entropy(Var),
    PpoClip {
        logp: Var,
        ratio: f64,
        adv: f64,
        clipped: bool,
    },
    SquaredError(Var, f64),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub const LN_EPS: f64 = 1e-5;

/// Records a forward computation so that [`Tape::backward`] can produce
/// exact parameter gradients.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        let mut out = self.value(x).clone();
        assert_eq!((1, out.cols), bias.shape(), "bias shape");
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    pub fn sum(&mut self, xs: Vec<Var>) -> Var {
        assert!(!xs.is_empty(), "sum of nothing");
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            out.add_assign(self.value(x));
        }
        self.push(out, Op::Sum(xs))
    }

    /// `s * x`
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Affine(x, s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.ln());
        self.push(out, Op::Log(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r), None);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row-wise log-softmax. `masks[r]` (when non-empty) marks the admissible
    /// columns of row `r`; the others get `-inf`.
    pub fn log_softmax(&mut self, x: Var, masks: Vec<Vec<bool>>) -> Var {
        let src = self.value(x);
        assert!(masks.is_empty() || masks.len() == src.rows, "mask rows");
        let mut out = src.clone();
        for r in 0..out.rows {
            let mask = masks.get(r).filter(|m| !m.is_empty()).map(|m| m.as_slice());
            log_softmax_in_place(out.row_mut(r), mask);
        }
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let src = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = src.cols as f64;
        let mut xhat = src.clone();
        let mut inv_std = Vec::with_capacity(src.rows);
        for r in 0..src.rows {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for r in 0..out.rows {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Output row `r` is the mean of the source rows listed in `groups[r]`.
    pub fn pool_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let src = self.value(x);
        let mut out = Matrix::zeros(groups.len(), src.cols);
        for (r, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "empty pooling group");
            let w = 1.0 / g.len() as f64;
            let o = out.row_mut(r);
            for &s in g {
                for (o, v) in o.iter_mut().zip(src.row(s)) {
                    *o += w * v;
                }
            }
        }
        self.push(out, Op::PoolRows(x, groups))
    }

    pub fn concat_cols(&mut self, xs: Vec<Var>) -> Var {
        let rows = self.value(xs[0]).rows;
        let cols: usize = xs.iter().map(|&x| self.value(x).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &x in &xs {
                let m = self.value(x);
                assert_eq!(m.rows, rows, "concat rows");
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(xs))
    }

    pub fn concat_rows(&mut self, xs: Vec<Var>) -> Var {
        let cols = self.value(xs[0]).cols;
        let mut data = Vec::new();
        for &x in &xs {
            let m = self.value(x);
            assert_eq!(m.cols, cols, "concat cols");
            data.extend_from_slice(&m.data);
        }
        let out = Matrix::from_vec(data.len() / cols.max(1), cols, data);
        self.push(out, Op::ConcatRows(xs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let src = self.value(x);
        let mut out = Matrix::zeros(src.rows, width);
        for r in 0..src.rows {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    /// Scalar `Σ w · x[r, c]` over the given entries.
    pub fn pick(&mut self, x: Var, entries: Vec<(usize, usize, f64)>) -> Var {
        let src = self.value(x);
        let total = entries.iter().map(|&(r, c, w)| w * src.at(r, c)).sum();
        self.push(Matrix::scalar(total), Op::Pick(x, entries))
    }

    /// `out[r] = beta[r] * shared + (1 - beta[r]) * rows[r]`
    pub fn mix_rows(&mut self, beta: Var, shared: Var, rows: Var) -> Var {
        let (b, s, m) = (self.value(beta), self.value(shared), self.value(rows));
        assert_eq!(b.shape(), (m.rows, 1), "gate shape");
        assert_eq!(s.shape(), (1, m.cols), "shared shape");
        let mut out = m.clone();
        for r in 0..m.rows {
            let br = b.data[r];
            for (o, sv) in out.row_mut(r).iter_mut().zip(&s.data) {
                *o = br * sv + (1.0 - br) * *o;
            }
        }
        self.push(out, Op::MixRows { beta, shared, rows })
    }

    /// Per-row entropy of a log-probability matrix; `-inf` entries are skipped.
    pub fn entropy(&mut self, logp: Var) -> Var {
        let src = self.value(logp);
        let data = (0..src.rows)
            .map(|r| {
                -src.row(r)
                    .iter()
                    .filter(|l| l.is_finite())
                    .map(|l| l.exp() * l)
                    .sum::<f64>()
            })
            .collect();
        let out = Matrix::from_vec(src.rows, 1, data);
        self.push(out, Op::Entropy(logp))
    }

    /// Negated clipped surrogate `-min(r·A, clip(r, 1±ε)·A)` with
    /// `r = exp(logp - old_logp)`.
    pub fn ppo_clip(&mut self, logp: Var, old_logp: f64, adv: f64, eps: f64) -> Var {
        let ratio = (self.scalar(logp) - old_logp).exp();
        let unclipped = ratio * adv;
        let clipped_v = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        let clipped = clipped_v < unclipped;
        let obj = unclipped.min(clipped_v);
        self.push(
            Matrix::scalar(-obj),
            Op::PpoClip {
                logp,
                ratio,
                adv,
                clipped,
            },
        )
    }

    /// `(x - target)²` for a scalar `x`.
    pub fn squared_error(&mut self, x: Var, target: f64) -> Var {
        let d = self.scalar(x) - target;
        self.push(Matrix::scalar(d * d), Op::SquaredError(x, target))
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::zeros_like(self.params);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddBias(x, b) => {
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *x, g);
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        acc(&mut grads, x, g.clone());
                    }
                }
                Op::Affine(x, s) => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, *x, d);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, vb, |g, y| g * y);
                    let db = zip_map(&g, va, |g, x| g * x);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let d = zip_map(&g, self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[i].value.as_ref().expect("value");
                    let d = zip_map(&g, y, |g, y| g * y * (1.0 - y));
                    acc(&mut grads, *x, d);
                }
                Op::Log(x) => {
                    let d = zip_map(&g, self.value(*x), |g, x| g / x);
                    acc(&mut grads, *x, d);
                }
                Op::SoftmaxRows(x) => {
                    let y = self.nodes[i].value.as_ref().expect("value");
                    let mut d = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let s = dot(g.row(r), y.row(r));
                        for c in 0..g.cols {
                            *d.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - s);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::LogSoftmax(x) => {
                    let y = self.nodes[i].value.as_ref().expect("value");
                    let mut d = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let s: f64 = g
                            .row(r)
                            .iter()
                            .zip(y.row(r))
                            .filter(|(_, l)| l.is_finite())
                            .map(|(g, _)| g)
                            .sum();
                        for c in 0..g.cols {
                            let l = y.at(r, c);
                            if l.is_finite() {
                                *d.at_mut(r, c) = g.at(r, c) - l.exp() * s;
                            }
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let n = g.cols as f64;
                    let mut dg = Matrix::zeros(1, g.cols);
                    let mut db = Matrix::zeros(1, g.cols);
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..g.cols {
                            dg.data[c] += gr[c] * xr[c];
                            db.data[c] += gr[c];
                            let dxh = gr[c] * gv.data[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xr[c];
                        }
                        let is = inv_std[r];
                        for c in 0..g.cols {
                            let dxh = gr[c] * gv.data[c];
                            *dx.at_mut(r, c) = is / n * (n * dxh - sum_dxh - xr[c] * sum_dxh_xh);
                        }
                    }
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *x, dx);
                }
                Op::PoolRows(x, groups) => {
                    let src = self.value(*x);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    for (r, grp) in groups.iter().enumerate() {
                        let w = 1.0 / grp.len() as f64;
                        for &s in grp {
                            for (dv, gv) in d.row_mut(s).iter_mut().zip(g.row(r)) {
                                *dv += w * gv;
                            }
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let cols = self.value(x).cols;
                        let mut d = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, x, d);
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let rows = self.value(x).rows;
                        let d = Matrix::from_vec(
                            rows,
                            g.cols,
                            g.data[off * g.cols..(off + rows) * g.cols].to_vec(),
                        );
                        off += rows;
                        acc(&mut grads, x, d);
                    }
                }
                Op::SliceCols(x, start) => {
                    let src = self.value(*x);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Pick(x, entries) => {
                    let src = self.value(*x);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    for &(r, c, w) in entries {
                        *d.at_mut(r, c) += w * g.data[0];
                    }
                    acc(&mut grads, *x, d);
                }
                Op::MixRows { beta, shared, rows } => {
                    let (b, s, m) = (self.value(*beta), self.value(*shared), self.value(*rows));
                    let mut db = Matrix::zeros(m.rows, 1);
                    let mut ds = Matrix::zeros(1, m.cols);
                    let mut dm = Matrix::zeros(m.rows, m.cols);
                    for r in 0..m.rows {
                        let br = b.data[r];
                        for c in 0..m.cols {
                            let gv = g.at(r, c);
                            db.data[r] += gv * (s.data[c] - m.at(r, c));
                            ds.data[c] += gv * br;
                            *dm.at_mut(r, c) = gv * (1.0 - br);
                        }
                    }
                    acc(&mut grads, *beta, db);
                    acc(&mut grads, *shared, ds);
                    acc(&mut grads, *rows, dm);
                }
                Op::Entropy(x) => {
                    let src = self.value(*x);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        for c in 0..src.cols {
                            let l = src.at(r, c);
                            if l.is_finite() {
                                *d.at_mut(r, c) = -g.data[r] * l.exp() * (l + 1.0);
                            }
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::PpoClip {
                    logp,
                    ratio,
                    adv,
                    clipped,
                } => {
                    let d = if *clipped { 0.0 } else { -ratio * adv * g.data[0] };
                    acc(&mut grads, *logp, Matrix::scalar(d));
                }
                Op::SquaredError(x, t) => {
                    let d = 2.0 * (self.scalar(*x) - t) * g.data[0];
                    acc(&mut grads, *x, Matrix::scalar(d));
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows, a.cols, data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax; masked-out entries become exactly 0. An all-masked row
/// becomes all zeros.
pub fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    log_softmax_in_place(row, mask);
    row.iter_mut().for_each(|v| *v = if v.is_finite() { v.exp() } else { 0.0 });
}

pub fn log_softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (v, &keep) in row.iter_mut().zip(m) {
            if !keep {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        row.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        return;
    }
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|v| *v -= lse);
}
