//! Reverse-mode automatic differentiation over row-major 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward evaluation; calling
//! [`Graph::backward`] walks the tape in reverse. Token batches are stored as
//! `[batch * len, width]` matrices described by a [`SeqLayout`], so linear
//! layers run as a single matrix product over the whole batch while
//! attention and pooling act per sample.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{cast, ParamId, ParamStore, Scalar};

/// `batch` sequences of `len` rows each, stored contiguously.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
}

impl SeqLayout {
    pub fn new(batch: usize, len: usize) -> Self {
        Self { batch, len }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    /// Keeps the inner tanh for the backward pass.
    Gelu {
        x: Var,
        tanh: Array2<F>,
    },
    Attention {
        qkv: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<Array2<F>>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanPool {
        x: Var,
        layout: SeqLayout,
    },
    SegmentScale {
        x: Var,
        layout: SeqLayout,
        factors: Vec<F>,
    },
    Mse {
        pred: Var,
        diff: Array2<F>,
    },
    SoftCrossEntropy {
        logits: Var,
        probs: Array2<F>,
        targets: Array2<F>,
    },
    BceWithLogits {
        logits: Var,
        targets: Array2<F>,
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of one forward evaluation.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted (used by gradient checks).
    pub fn variable(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter. Repeated uses of one id share a node, so tied
    /// weights accumulate their gradient in one place.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Parameter read as a constant (frozen weights).
    pub fn frozen_param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// `x + row` with `row` of shape `[1, cols]` broadcast over all rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let value = self.value(x) + &r.row(0);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let value = self.value(x) * s;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n: F = cast(cols as f64);
        let eps: F = cast(LN_EPS);
        let mut xhat = Array2::<F>::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for (r, mut out) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = r.sum() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            Zip::from(&mut out).and(&r).for_each(|o, &v| *o = (v - mean) * inv);
            rstd.push(inv);
        }
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let mut value = xhat.clone();
        for mut row in value.outer_iter_mut() {
            Zip::from(&mut row)
                .and(&g)
                .and(&b)
                .for_each(|o, &gi, &bi| *o = *o * gi + bi);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh = xv.mapv(gelu_tanh);
        let mut value = xv.clone();
        Zip::from(&mut value).and(&tanh).for_each(|v, &t| *v = gelu_from(*v, t));
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x, tanh }, rg)
    }

    /// Multi-head scaled dot-product self-attention within each sequence of
    /// `layout`. `qkv` packs queries, keys and values as `[rows, 3 * d]`.
    pub fn attention(&mut self, qkv: Var, layout: SeqLayout, heads: usize) -> Var {
        let qv = self.value(qkv);
        let (rows, width) = qv.dim();
        assert_eq!(rows, layout.rows(), "attention layout");
        assert_eq!(width % 3, 0);
        let d = width / 3;
        assert_eq!(d % heads, 0, "hidden not divisible by heads");
        let dh = d / heads;
        let scale: F = cast(1.0 / (dh as f64).sqrt());
        let mut out = Array2::<F>::zeros((rows, d));
        let mut probs = Vec::with_capacity(layout.batch * heads);
        for b in 0..layout.batch {
            let r = b * layout.len..(b + 1) * layout.len;
            for h in 0..heads {
                let q = qv.slice(s![r.clone(), h * dh..(h + 1) * dh]);
                let k = qv.slice(s![r.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qv.slice(s![r.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut sc = q.dot(&k.t());
                sc *= scale;
                softmax_rows(&mut sc);
                let o = sc.dot(&v);
                out.slice_mut(s![r.clone(), h * dh..(h + 1) * dh]).assign(&o);
                probs.push(sc);
            }
        }
        let rg = self.rg(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                layout,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Output row `r` is input row `idx[r]`. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut value = Array2::<F>::zeros((idx.len(), xv.ncols()));
        for (mut out, &i) in value.outer_iter_mut().zip(&idx) {
            out.assign(&xv.row(i));
        }
        let rg = self.rg(x);
        self.push(value, Op::GatherRows { x, idx }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat widths");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat heights");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Per-sequence mean over rows: `[batch * len, d] -> [batch, d]`.
    pub fn mean_pool(&mut self, x: Var, layout: SeqLayout) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), layout.rows());
        let mut value = Array2::<F>::zeros((layout.batch, xv.ncols()));
        let n: F = cast(layout.len.max(1) as f64);
        for b in 0..layout.batch {
            let seg = xv.slice(s![b * layout.len..(b + 1) * layout.len, ..]);
            let mut row = value.row_mut(b);
            for r in seg.outer_iter() {
                row += &r;
            }
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(x);
        self.push(value, Op::MeanPool { x, layout }, rg)
    }

    /// Multiplies every row of sequence `b` by `factors[b]`.
    pub fn segment_scale(&mut self, x: Var, layout: SeqLayout, factors: Vec<F>) -> Var {
        assert_eq!(factors.len(), layout.batch);
        let mut value = self.value(x).clone();
        for (b, &f) in factors.iter().enumerate() {
            value
                .slice_mut(s![b * layout.len..(b + 1) * layout.len, ..])
                .mapv_inplace(|v| v * f);
        }
        let rg = self.rg(x);
        self.push(value, Op::SegmentScale { x, layout, factors }, rg)
    }

    /// Mean squared error over all elements, as a `[1, 1]` scalar.
    pub fn mse(&mut self, pred: Var, target: &Array2<F>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "mse shape");
        let diff = pv - target;
        let count = diff.len().max(1);
        let loss = diff.iter().map(|&d| d * d).sum::<F>() / cast(count as f64);
        let rg = self.rg(pred);
        self.push(Array2::from_elem((1, 1), loss), Op::Mse { pred, diff }, rg)
    }

    /// Cross-entropy against soft target distributions, averaged over rows.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Array2<F>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim(), "cross-entropy shape");
        let mut probs = lv.clone();
        softmax_rows(&mut probs);
        let rows = lv.nrows().max(1);
        let mut loss = F::zero();
        for (l, t) in lv.outer_iter().zip(targets.outer_iter()) {
            let m = l.fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = m + l.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            for (&li, &ti) in l.iter().zip(t.iter()) {
                if ti != F::zero() {
                    loss -= ti * (li - lse);
                }
            }
        }
        loss /= cast(rows as f64);
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftCrossEntropy {
                logits,
                probs,
                targets: targets.clone(),
            },
            rg,
        )
    }

    /// Sigmoid binary cross-entropy averaged over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Array2<F>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim(), "bce shape");
        let count = lv.len().max(1);
        let mut loss = F::zero();
        Zip::from(lv).and(targets).for_each(|&l, &t| {
            loss += l.max(F::zero()) - l * t + (F::one() + (-l.abs()).exp()).ln();
        });
        loss /= cast(count as f64);
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        )
    }

    /// Back-propagates from the `[1, 1]` node `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.mapv(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => {
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g * *s);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.rg(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if self.rg(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *beta, gb);
                    }
                    if self.rg(*x) {
                        let gam = self.value(*gamma).row(0);
                        let n: F = cast(xhat.ncols() as f64);
                        let mut gx = Array2::<F>::zeros(xhat.dim());
                        for (((gr, xr), mut out), &inv) in
                            g.outer_iter().zip(xhat.outer_iter()).zip(gx.outer_iter_mut()).zip(rstd)
                        {
                            let dxhat: Vec<F> = gr.iter().zip(gam.iter()).map(|(&a, &b)| a * b).collect();
                            let mean_d = dxhat.iter().copied().sum::<F>() / n;
                            let mean_dx = dxhat.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
                            for ((o, &dh), &xh) in out.iter_mut().zip(&dxhat).zip(xr.iter()) {
                                *o = inv * (dh - mean_d - xh * mean_dx);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Gelu { x, tanh } => {
                    if self.rg(*x) {
                        let mut gx = g;
                        Zip::from(&mut gx)
                            .and(self.value(*x))
                            .and(tanh)
                            .for_each(|gv, &xv, &t| *gv *= gelu_grad(xv, t));
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Attention {
                    qkv,
                    layout,
                    heads,
                    probs,
                } => {
                    if self.rg(*qkv) {
                        let qv = self.value(*qkv);
                        let d = qv.ncols() / 3;
                        let dh = d / heads;
                        let scale: F = cast(1.0 / (dh as f64).sqrt());
                        let mut gq = Array2::<F>::zeros(qv.dim());
                        for b in 0..layout.batch {
                            let r = b * layout.len..(b + 1) * layout.len;
                            for h in 0..*heads {
                                let p = &probs[b * heads + h];
                                let q = qv.slice(s![r.clone(), h * dh..(h + 1) * dh]);
                                let k = qv.slice(s![r.clone(), d + h * dh..d + (h + 1) * dh]);
                                let v = qv.slice(s![r.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                                let go = g.slice(s![r.clone(), h * dh..(h + 1) * dh]);
                                let gv = p.t().dot(&go);
                                let gp = go.dot(&v.t());
                                let mut gs = gp;
                                for (mut gs_row, p_row) in gs.outer_iter_mut().zip(p.outer_iter()) {
                                    let dot = gs_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).sum::<F>();
                                    Zip::from(&mut gs_row)
                                        .and(&p_row)
                                        .for_each(|x, &pv| *x = pv * (*x - dot) * scale);
                                }
                                let gqh = gs.dot(&k);
                                let gkh = gs.t().dot(&q);
                                gq.slice_mut(s![r.clone(), h * dh..(h + 1) * dh]).assign(&gqh);
                                gq.slice_mut(s![r.clone(), d + h * dh..d + (h + 1) * dh]).assign(&gkh);
                                gq.slice_mut(s![r.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh])
                                    .assign(&gv);
                            }
                        }
                        accumulate(&mut grads, *qkv, gq);
                    }
                }
                Op::GatherRows { x, idx } => {
                    if self.rg(*x) {
                        let mut gx = Array2::<F>::zeros(self.value(*x).dim());
                        for (gr, &i) in g.outer_iter().zip(idx) {
                            let mut row = gx.row_mut(i);
                            row += &gr;
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.rg(p) {
                            let gp = g.slice(s![start..start + n, ..]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        if self.rg(p) {
                            let gp = g.slice(s![.., start..start + n]).to_owned();
                            accumulate(&mut grads, p, gp);
                        }
                        start += n;
                    }
                }
                Op::MeanPool { x, layout } => {
                    if self.rg(*x) {
                        let n: F = cast(layout.len.max(1) as f64);
                        let mut gx = Array2::<F>::zeros(self.value(*x).dim());
                        for b in 0..layout.batch {
                            let gr = g.row(b).mapv(|v| v / n);
                            for mut row in gx
                                .slice_mut(s![b * layout.len..(b + 1) * layout.len, ..])
                                .outer_iter_mut()
                            {
                                row.assign(&gr);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::SegmentScale { x, layout, factors } => {
                    if self.rg(*x) {
                        let mut gx = g;
                        for (b, &f) in factors.iter().enumerate() {
                            gx.slice_mut(s![b * layout.len..(b + 1) * layout.len, ..])
                                .mapv_inplace(|v| v * f);
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Mse { pred, diff } => {
                    if self.rg(*pred) {
                        let c: F = cast(2.0 / diff.len().max(1) as f64);
                        let gp = diff * (g[[0, 0]] * c);
                        accumulate(&mut grads, *pred, gp);
                    }
                }
                Op::SoftCrossEntropy { logits, probs, targets } => {
                    if self.rg(*logits) {
                        let rows: F = cast(probs.nrows().max(1) as f64);
                        let mut gl = probs.clone();
                        for (mut gr, t) in gl.outer_iter_mut().zip(targets.outer_iter()) {
                            let mass = t.sum();
                            Zip::from(&mut gr)
                                .and(&t)
                                .for_each(|p, &tv| *p = (*p * mass - tv) / rows * g[[0, 0]]);
                        }
                        accumulate(&mut grads, *logits, gl);
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    if self.rg(*logits) {
                        let count: F = cast(targets.len().max(1) as f64);
                        let mut gl = self.value(*logits).clone();
                        Zip::from(&mut gl).and(targets).for_each(|l, &t| {
                            let sig = F::one() / (F::one() + (-*l).exp());
                            *l = (sig - t) / count * g[[0, 0]];
                        });
                        accumulate(&mut grads, *logits, gl);
                    }
                }
            }
        }

        let params = self.params.iter().map(|(&id, &var)| (id, var)).collect::<Vec<_>>();
        Gradients { grads, params }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn softmax_rows<F: Scalar>(m: &mut Array2<F>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn gelu_tanh<F: Scalar>(x: F) -> F {
    let c: F = cast((2.0 / std::f64::consts::PI).sqrt());
    let k: F = cast(0.044715);
    (c * (x + k * x * x * x)).tanh()
}

fn gelu_from<F: Scalar>(x: F, t: F) -> F {
    let half: F = cast(0.5);
    half * x * (F::one() + t)
}

/// Derivative at `x`, given `t = gelu_tanh(x)`.
fn gelu_grad<F: Scalar>(x: F, t: F) -> F {
    let c: F = cast((2.0 / std::f64::consts::PI).sqrt());
    let k: F = cast(0.044715);
    let half: F = cast(0.5);
    let three: F = cast(3.0);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for every parameter that took part in the graph, indexed by
    /// [`ParamId`]. Parameters not reached are `None`.
    pub fn params(self, store_len: usize) -> Vec<Option<Array2<F>>> {
        let mut out: Vec<Option<Array2<F>>> = (0..store_len).map(|_| None).collect();
        let mut grads = self.grads;
        for (id, var) in self.params {
            out[id.0] = grads[var.0].take();
        }
        out
    }

    /// Gradient of a [`Graph::variable`] input.
    pub fn of(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }
}
