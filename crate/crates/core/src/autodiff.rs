//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves either
//! borrow parameter storage (no copy) or own an input matrix. Calling
//! [`Tape::backward`] on a scalar node returns the gradient of every node
//! that transitively depends on a leaf marked as requiring gradients.

use std::borrow::Cow;

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Softmax(Var),
    SliceBlock {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SoftCe {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    MaskedMse {
        pred: Var,
        target: Var,
        rows: Vec<usize>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf borrowing external storage.
    pub fn borrowed(&mut self, value: &'a Matrix, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    /// Leaf owning its value.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(av.rows, bv.cols);
        gemm(av.rows, av.cols, bv.cols, 1.0, &av.data, false, &bv.data, false, 0.0, &mut out.data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_nt inner dimension");
        let mut out = Matrix::zeros(av.rows, bv.rows);
        gemm(av.rows, av.cols, bv.rows, 1.0, &av.data, false, &bv.data, true, 0.0, &mut out.data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::Add(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1);
        assert_eq!(av.cols, rv.cols, "add_row width");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Cow::Owned(out), Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1×d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, d) = xv.shape();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = Matrix::zeros(rows, d);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * g.data[c] + b.data[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<f64> = xv
            .data
            .iter()
            .map(|&v| {
                let u = 2.0 * GELU_C * (v + GELU_K * v * v * v);
                // tanh(u/2) via one exp; saturates cleanly for large |u|
                if u > 40.0 {
                    1.0
                } else {
                    1.0 - 2.0 / (u.exp() + 1.0)
                }
            })
            .collect();
        let out = Matrix {
            rows: xv.rows,
            cols: xv.cols,
            data: xv.data.iter().zip(&tanh).map(|(&v, t)| 0.5 * v * (1.0 + t)).collect(),
        };
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::Gelu { x, tanh }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let rows = self.value(x).rows;
        self.slice_block(x, 0, rows, start, width)
    }

    /// The `rows×cols` sub-matrix whose top-left entry is `(row0, col0)`.
    pub fn slice_block(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert!(row0 + rows <= xv.rows && col0 + cols <= xv.cols, "slice outside matrix");
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&xv.row(row0 + r)[col0..col0 + cols]);
        }
        let ng = self.ng(x);
        self.push(Cow::Owned(out), Op::SliceBlock { x, row0, col0 }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows cols");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Cow::Owned(Matrix { rows, cols, data }),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Output row `i` is row `index[i]` of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(index.len(), xv.cols);
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(src));
        }
        let ng = self.ng(x);
        self.push(
            Cow::Owned(out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        )
    }

    /// `-sum_c target_c * log softmax(logits)_c` for a `1×C` logit row.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &[f64]) -> Var {
        assert_eq!(self.value(logits).rows, 1, "soft_cross_entropy expects a single logit row");
        self.weighted_soft_ce(logits, target, &[1.0])
    }

    /// `sum_r w_r * CE(logits_r, targets_r)` over the rows of `logits`;
    /// `targets` is row-major with one soft label per row.
    pub fn weighted_soft_ce(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let (rows, c) = lv.shape();
        assert_eq!(targets.len(), rows * c, "soft cross-entropy target shape");
        assert_eq!(weights.len(), rows, "one weight per logit row");
        let mut probs = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            let z = lv.row(r);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let t = &targets[r * c..(r + 1) * c];
            let row_loss: f64 = t
                .iter()
                .zip(z)
                .map(|(t, z)| if *t == 0.0 { 0.0 } else { -t * (z - lse) })
                .sum();
            if weights[r] != 0.0 {
                loss += weights[r] * row_loss;
            }
            for k in 0..c {
                probs[r * c + k] = (z[k] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        self.push(
            Cow::Owned(Matrix::scalar(loss)),
            Op::SoftCe {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Var {
        let c = self.value(logits).cols;
        let mut t = vec![0.0; c];
        t[class] = 1.0;
        self.soft_cross_entropy(logits, &t)
    }

    /// Mean squared error over the listed rows only.
    pub fn masked_mse(&mut self, pred: Var, target: Var, rows: &[usize]) -> Var {
        let pv = self.value(pred);
        let tv = self.value(target);
        assert_eq!(pv.shape(), tv.shape(), "masked_mse shapes");
        assert!(!rows.is_empty(), "masked_mse needs at least one row");
        let mut s = 0.0;
        for &r in rows {
            for (p, t) in pv.row(r).iter().zip(tv.row(r)) {
                s += (p - t) * (p - t);
            }
        }
        let loss = s / (rows.len() * pv.cols) as f64;
        let ng = self.ng(pred) || self.ng(target);
        self.push(
            Cow::Owned(Matrix::scalar(loss)),
            Op::MaskedMse {
                pred,
                target,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// `sum_i w_i * x_i` over `1×1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(x, w)| w * self.value(x).item()).sum();
        let ng = terms.iter().any(|&(x, _)| self.ng(x));
        self.push(Cow::Owned(Matrix::scalar(v)), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Backpropagates from the scalar `root`, scaled by `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Grads {
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(Matrix::scalar(seed));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.cols);
                    if self.ng(*a) {
                        let acc = slot(&mut grads, *a, m, k);
                        gemm(m, n, k, 1.0, &g.data, false, &bv.data, true, 1.0, &mut acc.data);
                    }
                    if self.ng(*b) {
                        let acc = slot(&mut grads, *b, k, n);
                        gemm(k, m, n, 1.0, &av.data, true, &g.data, false, 1.0, &mut acc.data);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.rows);
                    if self.ng(*a) {
                        let acc = slot(&mut grads, *a, m, k);
                        gemm(m, n, k, 1.0, &g.data, false, &bv.data, false, 1.0, &mut acc.data);
                    }
                    if self.ng(*b) {
                        let acc = slot(&mut grads, *b, n, k);
                        gemm(n, m, k, 1.0, &g.data, true, &av.data, false, 1.0, &mut acc.data);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let acc = slot(&mut grads, *row, 1, g.cols);
                        for r in 0..g.rows {
                            for (o, v) in acc.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                }
                Op::Scale(a, s) => {
                    if self.ng(*a) {
                        let acc = slot(&mut grads, *a, g.rows, g.cols);
                        acc.add_scaled(&g, *s);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = g.cols;
                    if self.ng(*gamma) {
                        let acc = slot(&mut grads, *gamma, 1, d);
                        for r in 0..g.rows {
                            for c in 0..d {
                                acc.data[c] += g.data[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    if self.ng(*beta) {
                        let acc = slot(&mut grads, *beta, 1, d);
                        for r in 0..g.rows {
                            for (o, v) in acc.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    if self.ng(*x) {
                        let gv = &self.value(*gamma).data;
                        let acc = slot(&mut grads, *x, g.rows, d);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..g.rows {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..d {
                                let v = g.data[r * d + c] * gv[c];
                                dxhat[c] = v;
                                s1 += v;
                                s2 += v * xhat[r * d + c];
                            }
                            let k = inv_std[r] / d as f64;
                            for c in 0..d {
                                acc.data[r * d + c] +=
                                    k * (d as f64 * dxhat[c] - s1 - xhat[r * d + c] * s2);
                            }
                        }
                    }
                }
                Op::Gelu { x, tanh } => {
                    let xv = self.value(*x);
                    let acc = slot(&mut grads, *x, g.rows, g.cols);
                    for (((o, &v), gi), &t) in acc.data.iter_mut().zip(&xv.data).zip(&g.data).zip(tanh) {
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let acc = slot(&mut grads, *x, g.rows, g.cols);
                    for r in 0..g.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in acc.row_mut(r).iter_mut().enumerate() {
                            *o += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::SliceBlock { x, row0, col0 } => {
                    let xv = self.value(*x);
                    let acc = slot(&mut grads, *x, xv.rows, xv.cols);
                    for r in 0..g.rows {
                        let dst = &mut acc.row_mut(row0 + r)[*col0..*col0 + g.cols];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        if self.ng(p) {
                            let acc = slot(&mut grads, p, g.rows, w);
                            for r in 0..g.rows {
                                for (o, v) in acc.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                    *o += v;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.ng(p) {
                            let (rows, cols) = self.value(p).shape();
                            let acc = slot(&mut grads, p, rows, cols);
                            for (o, v) in acc.data.iter_mut().zip(&g.data[off..off + len]) {
                                *o += v;
                            }
                        }
                        off += len;
                    }
                }
                Op::GatherRows { x, index } => {
                    let (rows, cols) = self.value(*x).shape();
                    let acc = slot(&mut grads, *x, rows, cols);
                    for (i, &src) in index.iter().enumerate() {
                        for (o, v) in acc.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::SoftCe {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let gs = g.item();
                    let (rows, c) = self.value(*logits).shape();
                    let acc = slot(&mut grads, *logits, rows, c);
                    for r in 0..rows {
                        let w = gs * weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let t = &targets[r * c..(r + 1) * c];
                        let mass: f64 = t.iter().sum();
                        for k in 0..c {
                            acc.data[r * c + k] += w * (probs[r * c + k] * mass - t[k]);
                        }
                    }
                }
                Op::MaskedMse { pred, target, rows } => {
                    let gs = g.item();
                    let (pv, tv) = (self.value(*pred), self.value(*target));
                    let (nr, nc) = pv.shape();
                    let k = 2.0 * gs / (rows.len() * nc) as f64;
                    for (v, sign) in [(*pred, 1.0), (*target, -1.0)] {
                        if !self.ng(v) {
                            continue;
                        }
                        let acc = slot(&mut grads, v, nr, nc);
                        for &r in rows {
                            for c in 0..nc {
                                let i = r * nc + c;
                                acc.data[i] += sign * k * (pv.data[i] - tv.data[i]);
                            }
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    let gs = g.item();
                    for &(x, w) in terms {
                        if self.ng(x) {
                            let acc = slot(&mut grads, x, 1, 1);
                            acc.data[0] += gs * w;
                        }
                    }
                }
            }
        }
        Grads { grads }
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, rows: usize, cols: usize) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        none => *none = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::rng(seed);
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Checks d(loss)/d(leaf) for every entry of every leaf by central differences.
    fn check<F>(leaves: Vec<Matrix>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root, 1.0);
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let mut m = m.clone();
                            if j == li {
                                m.data[e] += delta;
                            }
                            t.leaf(m, false)
                        })
                        .collect();
                    let r = f(&mut t, &vs);
                    t.value(r).item()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grads.get(vars[li]).map_or(0.0, |g| g.data[e]);
                assert!(
                    (num - ana).abs() <= 1e-6 + 1e-5 * num.abs().max(ana.abs()),
                    "leaf {li} entry {e}: numeric {num} analytic {ana}"
                );
            }
        }
    }

    fn reduce(t: &mut Tape, x: Var, w: &Matrix) -> Var {
        // sum(x * w) as a 1x1 product of flattened rows
        let wv = t.leaf(w.clone(), false);
        let flat_x = flatten(t, x);
        let flat_w = flatten(t, wv);
        let p = t.matmul_nt(flat_x, flat_w);
        t.weighted_sum(&[(p, 1.0)])
    }

    fn flatten(t: &mut Tape, x: Var) -> Var {
        let rows = t.value(x).rows;
        let parts: Vec<Var> = (0..rows).map(|r| t.gather_rows(x, &[r])).collect();
        t.concat_cols(&parts)
    }

    #[test]
    fn matmul_and_transposed_matmul_gradients() {
        let w = random(3, 5, 9);
        check(vec![random(3, 4, 1), random(4, 5, 2)], |t, v| {
            let c = t.matmul(v[0], v[1]);
            reduce(t, c, &w)
        });
        check(vec![random(3, 4, 3), random(5, 4, 4)], |t, v| {
            let c = t.matmul_nt(v[0], v[1]);
            reduce(t, c, &w)
        });
    }

    #[test]
    fn layer_norm_gelu_softmax_gradients() {
        let w = random(3, 6, 10);
        check(vec![random(3, 6, 5), random(1, 6, 6), random(1, 6, 7)], |t, v| {
            let n = t.layer_norm(v[0], v[1], v[2]);
            let g = t.gelu(n);
            let s = t.softmax_rows(g);
            reduce(t, s, &w)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let w = random(4, 3, 11);
        check(vec![random(2, 5, 12), random(1, 3, 13)], |t, v| {
            let a = t.slice_cols(v[0], 1, 3);
            let b = t.slice_cols(v[0], 0, 2);
            let c = t.concat_cols(&[b, a]);
            let c = t.slice_cols(c, 2, 3);
            let c = t.slice_block(c, 1, 1, 0, 3);
            let c = t.concat_rows(&[c, c]);
            let r = t.concat_rows(&[c, v[1]]);
            let r = t.gather_rows(r, &[2, 0, 2, 1]);
            let r = t.add_row(r, v[1]);
            let r2 = t.scale(r, -0.7);
            let r = t.add(r, r2);
            reduce(t, r, &w)
        });
    }

    #[test]
    fn loss_op_gradients() {
        check(vec![random(1, 4, 21), random(3, 4, 22), random(3, 4, 20)], |t, v| {
            let ce = t.soft_cross_entropy(v[0], &[0.2, 0.5, 0.0, 0.3]);
            let ce2 = t.cross_entropy(v[0], 2);
            let mse = t.masked_mse(v[1], v[2], &[0, 2]);
            let targets = [0.0, 1.0, 0.0, 0.0, 0.3, 0.3, 0.2, 0.2, 1.0, 0.0, 0.0, 0.0];
            let ce3 = t.weighted_soft_ce(v[1], &targets, &[0.5, -1.0, 0.0]);
            t.weighted_sum(&[(ce, 0.5), (ce2, 1.5), (mse, 2.0), (ce3, 1.0)])
        });
    }

    #[test]
    fn leaves_without_grad_get_none() {
        let mut t = Tape::new();
        let a = t.leaf(random(2, 2, 1), false);
        let b = t.leaf(random(2, 2, 2), true);
        let c = t.matmul(a, b);
        let z = t.leaf(Matrix::zeros(2, 2), false);
        let l = t.masked_mse(c, z, &[0]);
        let g = t.backward(l, 1.0);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::row_vector(vec![1.0, 2.0, 0.5]), false);
        let ce = t.cross_entropy(z, 1);
        let lse = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        assert!((t.value(ce).item() - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::rng(3);
        let mut row: Vec<f64> = (0..7).map(|_| rng.random_range(-30.0..30.0)).collect();
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
