//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Calling
//! [`Tape::backward`] on a scalar node propagates adjoints to every node that
//! contributed to it. Constants created with [`Tape::constant`] never receive
//! gradient, which is how cached decoder memory is detached.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
    },
    Sum(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<usize, Var>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!((m.rows(), m.cols()), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for parameter `id`, created on first use and shared afterwards.
    pub fn param(&mut self, id: usize, value: &Matrix<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.params.insert(id, v);
        v
    }

    /// Parameter leaves registered on this tape, keyed by parameter id.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds the 1×c row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), r.cols(), "add_row width mismatch");
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(r.row(0)) {
                *x = *x + b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    /// Row-wise layer normalization with a 1×d gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (value, normalized, inv_std) =
            layer_norm_forward(self.value(x), self.value(gain), self.value(bias));
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax over the entries where `visible` is true; hidden
    /// entries come out exactly zero. A row with nothing visible is all zero.
    pub fn masked_softmax(&mut self, a: Var, visible: &[bool]) -> Var {
        let value = masked_softmax_forward(self.value(a), visible);
        let ng = self.ng(&[a]);
        self.push(value, Op::MaskedSoftmax(a), ng)
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(&[table]);
        self.push(value, Op::Gather(table, ids.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats);
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats);
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let src = self.value(a);
        if start == 0 && count == src.rows() {
            return a;
        }
        let value = src.slice_rows(start, count);
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Var {
        let src = self.value(a);
        if start == 0 && count == src.cols() {
            return a;
        }
        let value = src.slice_cols(start, count);
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target slot per row");
        let all = vec![true; l.len()];
        let probs = masked_softmax_forward(l, &all);
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                loss = loss - log_softmax_at(l.row(r), t);
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Sum of 1×1 nodes; an empty list yields a zero constant.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        if parts.is_empty() {
            return self.constant(Matrix::zeros(1, 1));
        }
        let mut acc = T::zero();
        for &p in parts {
            acc = acc + self.scalar(p);
        }
        let ng = self.ng(parts);
        self.push(Matrix::filled(1, 1, acc), Op::Sum(parts.to_vec()), ng)
    }

    /// Back-propagates from the 1×1 node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let mut gr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (acc, &x) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *row, gr);
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul_t(self.value(*b));
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.value(*a).t_matmul(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul(self.value(*b));
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = g.t_matmul(self.value(*a));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = g.cols();
                let gain_v = self.value(*gain);
                let mut g_gain = Matrix::zeros(1, d);
                let mut g_bias = Matrix::zeros(1, d);
                let mut gx = Matrix::zeros(g.rows(), d);
                let dn = T::from_f64(d as f64);
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let xh = normalized.row(r);
                    // dxhat = g * gain
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for c in 0..d {
                        let dxh = gr[c] * gain_v.get(0, c);
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh[c];
                        g_gain.set(0, c, g_gain.get(0, c) + gr[c] * xh[c]);
                        g_bias.set(0, c, g_bias.get(0, c) + gr[c]);
                    }
                    let out = gx.row_mut(r);
                    for c in 0..d {
                        let dxh = gr[c] * gain_v.get(0, c);
                        out[c] = is * (dxh - sum_dxh / dn - xh[c] * sum_dxh_xh / dn);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, g_gain);
                self.accumulate(grads, *bias, g_bias);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (c, out) in ga.row_mut(r).iter_mut().enumerate() {
                        *out = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, p, g.slice_rows(start, n));
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, p, g.slice_cols(start, n));
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0);
                let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let out = gl.row_mut(r);
                        for (o, &p) in out.iter_mut().zip(probs.row(r)) {
                            *o = p * scale;
                        }
                        out[t] = out[t] - scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, g.clone());
                }
            }
        }
    }
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Vec<T>) {
    let d = x.cols();
    let dn = T::from_f64(d as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (c, &v) in row.iter().enumerate() {
            let xh = (v - mean) * is;
            normalized.set(r, c, xh);
            out.set(r, c, xh * gain.get(0, c) + bias.get(0, c));
        }
    }
    (out, normalized, inv_std)
}

pub(crate) fn masked_softmax_forward<T: Scalar>(a: &Matrix<T>, visible: &[bool]) -> Matrix<T> {
    assert_eq!(visible.len(), a.len(), "mask shape mismatch");
    let cols = a.cols();
    let mut out = Matrix::zeros(a.rows(), cols);
    for r in 0..a.rows() {
        let row = a.row(r);
        let mask = &visible[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for (&v, &m) in row.iter().zip(mask) {
            if m && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        let o = out.row_mut(r);
        for c in 0..cols {
            if mask[c] {
                let e = (row[c] - max).exp();
                o[c] = e;
                total = total + e;
            }
        }
        for v in o.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

fn log_softmax_at<T: Scalar>(row: &[T], idx: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[idx] - lse
}
