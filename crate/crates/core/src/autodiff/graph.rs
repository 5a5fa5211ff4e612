//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the graph as leaves bound to a [`ParamSet`]; [`Graph::backward`] returns
//! their gradients. Token sequences of a batch are stored stacked along the
//! row axis (`batch * seq` rows), which is why several operations take a
//! `seq` argument.

use super::params::{Grads, ParamId, ParamSet, Tensor};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddPositional { x: Var, table: Var, seq: usize },
    Scale(Var, T),
    Exp(Var),
    SoftClamp(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<T> },
    SliceCols { x: Var, start: usize },
    ReverseTokens { x: Var, seq: usize },
    CausalShift { h: Var, ctx: Var, seq: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    SumSq(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (receives no gradient that is reported).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = self.push(t, Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.value(a).data, false, &self.value(b).data, false, T::zero(), &mut out);
        self.push(Tensor::new(m, n, out), Op::MatMul(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.rows, va.cols, data);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + row` with the `1×n` row broadcast over all rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows, 1);
        assert_eq!(xv.cols, rv.cols);
        let n = xv.cols;
        let data = xv.data.iter().enumerate().map(|(i, &v)| v + rv.data[i % n]).collect();
        let t = Tensor::new(xv.rows, n, data);
        self.push(t, Op::AddRow(x, row))
    }

    /// Adds rows `0..seq` of `table` to every length-`seq` block of `x`.
    pub fn add_positional(&mut self, x: Var, table: Var, seq: usize) -> Var {
        let (xv, tv) = (self.value(x), self.value(table));
        assert_eq!(xv.cols, tv.cols);
        assert!(seq <= tv.rows && xv.rows % seq == 0);
        let n = xv.cols;
        let data = xv.data.iter().enumerate().map(|(i, &v)| v + tv.data[((i / n) % seq) * n + i % n]).collect();
        let t = Tensor::new(xv.rows, n, data);
        self.push(t, Op::AddPositional { x, table, seq })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|&v| v * s).collect());
        self.push(t, Op::Scale(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|v| v.exp()).collect());
        self.push(t, Op::Exp(x))
    }

    /// `bound * tanh(x / bound)`.
    pub fn soft_clamp(&mut self, x: Var, bound: T) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.rows, xv.cols, xv.data.iter().map(|&v| bound * (v / bound).tanh()).collect());
        self.push(t, Op::SoftClamp(x, bound))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect();
        let t = Tensor::new(xv.rows, xv.cols, data);
        self.push(t, Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, n) = xv.shape();
        assert_eq!(gv.shape(), (1, n));
        assert_eq!(bv.shape(), (1, n));
        let nt = T::lit(n as f64);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xv.data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data[j] + bv.data[j];
            }
        }
        self.push(Tensor::new(rows, n, out), Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Multi-head scaled dot-product attention over `batch = rows / seq`
    /// independent sequences; `causal` masks keys after the query position.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        assert_eq!(kv.shape(), (rows, width));
        assert_eq!(vv.shape(), (rows, width));
        assert!(rows % seq == 0 && width % heads == 0);
        let batch = rows / seq;
        let dh = width / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qv.data[(b * seq + i) * width + h * dh..][..dh];
                    let kmax = if causal { i + 1 } else { seq };
                    let mut max = T::neg_infinity();
                    for j in 0..kmax {
                        let kj = &kv.data[(b * seq + j) * width + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        p[i * seq + j] = s;
                        max = max.max(s);
                    }
                    let mut denom = T::zero();
                    for j in 0..kmax {
                        let e = (p[i * seq + j] - max).exp();
                        p[i * seq + j] = e;
                        denom = denom + e;
                    }
                    let o = &mut out[(b * seq + i) * width + h * dh..][..dh];
                    for j in 0..kmax {
                        let w = p[i * seq + j] / denom;
                        p[i * seq + j] = w;
                        let vj = &vv.data[(b * seq + j) * width + h * dh..][..dh];
                        for (oo, &vvv) in o.iter_mut().zip(vj) {
                            *oo = *oo + w * vvv;
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(rows, width, out), Op::Attention { q, k, v, seq, heads, probs })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols);
        let mut data = Vec::with_capacity(xv.rows * len);
        for r in 0..xv.rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::new(xv.rows, len, data);
        self.push(t, Op::SliceCols { x, start })
    }

    /// Reverses token order inside every length-`seq` block of rows.
    pub fn reverse_tokens(&mut self, x: Var, seq: usize) -> Var {
        let xv = self.value(x);
        assert!(xv.rows.is_multiple_of(seq));
        let n = xv.cols;
        let mut data = Vec::with_capacity(xv.data.len());
        for b in 0..xv.rows / seq {
            for i in (0..seq).rev() {
                data.extend_from_slice(xv.row(b * seq + i));
            }
        }
        let t = Tensor::new(xv.rows, n, data);
        self.push(t, Op::ReverseTokens { x, seq })
    }

    /// For each sequence `b`: output row 0 is `ctx[b]`, output row `i` is
    /// input row `i - 1`; the last input row of every sequence is dropped.
    pub fn causal_shift(&mut self, h: Var, ctx: Var, seq: usize) -> Var {
        let (hv, cv) = (self.value(h), self.value(ctx));
        assert!(hv.rows % seq == 0);
        let batch = hv.rows / seq;
        assert_eq!(cv.shape(), (batch, hv.cols));
        let mut data = Vec::with_capacity(hv.data.len());
        for b in 0..batch {
            data.extend_from_slice(cv.row(b));
            for i in 0..seq - 1 {
                data.extend_from_slice(hv.row(b * seq + i));
            }
        }
        let t = Tensor::new(hv.rows, hv.cols, data);
        self.push(t, Op::CausalShift { h, ctx, seq })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tv.cols);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(ids.len(), tv.cols, data);
        self.push(t, Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq(x))
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.shape(loss), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = self.params.zeros_like();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (o, v) in out.tensors[id.index()].data.iter_mut().zip(&g) {
                        *o = *o + *v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), &g, false, &self.value(*b).data, true, T::zero(), &mut da);
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), &self.value(*a).data, true, &g, false, T::zero(), &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    let da = g.iter().zip(vb).map(|(&gg, &y)| gg * y).collect();
                    let db = g.iter().zip(va).map(|(&gg, &x)| gg * x).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let n = node.value.cols;
                    let mut dr = vec![T::zero(); n];
                    for (i, &v) in g.iter().enumerate() {
                        dr[i % n] = dr[i % n] + v;
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *x, g);
                }
                Op::AddPositional { x, table, seq } => {
                    let n = node.value.cols;
                    let (trows, _) = self.shape(*table);
                    let mut dt = vec![T::zero(); trows * n];
                    for (i, &v) in g.iter().enumerate() {
                        let p = ((i / n) % seq) * n + i % n;
                        dt[p] = dt[p] + v;
                    }
                    accumulate(&mut grads, *table, dt);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => {
                    let dx = g.iter().map(|&v| v * *s).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = g.iter().zip(&node.value.data).map(|(&gg, &y)| gg * y).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftClamp(x, bound) => {
                    let dx = g
                        .iter()
                        .zip(&node.value.data)
                        .map(|(&gg, &y)| {
                            let t = y / *bound;
                            gg * (T::one() - t * t)
                        })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let dx = g
                        .iter()
                        .zip(&self.value(*x).data)
                        .map(|(&gg, &v)| {
                            let t = (c * (v + a * v * v * v)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                            gg * (half * (T::one() + t) + half * v * dt)
                        })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (rows, n) = node.value.shape();
                    let gv = &self.value(*gamma).data;
                    let nt = T::lit(n as f64);
                    let mut dgamma = vec![T::zero(); n];
                    let mut dbeta = vec![T::zero(); n];
                    let mut dx = vec![T::zero(); rows * n];
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            dgamma[j] = dgamma[j] + gr[j] * hr[j];
                            dbeta[j] = dbeta[j] + gr[j];
                            dxhat[j] = gr[j] * gv[j];
                            mean_d = mean_d + dxhat[j];
                            mean_dh = mean_dh + dxhat[j] * hr[j];
                        }
                        mean_d = mean_d / nt;
                        mean_dh = mean_dh / nt;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, seq, heads, probs } => {
                    let (seq, heads) = (*seq, *heads);
                    let (rows, width) = node.value.shape();
                    let batch = rows / seq;
                    let dh = width / heads;
                    let scale = T::one() / T::lit(dh as f64).sqrt();
                    let (qv, kv, vv) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                    let mut dq = vec![T::zero(); rows * width];
                    let mut dk = vec![T::zero(); rows * width];
                    let mut dv = vec![T::zero(); rows * width];
                    let mut dp = vec![T::zero(); seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                            let off = |t: usize| (b * seq + t) * width + h * dh;
                            for i in 0..seq {
                                let go = &g[off(i)..][..dh];
                                // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                                let mut dot = T::zero();
                                for j in 0..seq {
                                    let pij = p[i * seq + j];
                                    if pij == T::zero() {
                                        dp[j] = T::zero();
                                        continue;
                                    }
                                    let vj = &vv[off(j)..][..dh];
                                    let d = go.iter().zip(vj).map(|(&a, &c)| a * c).sum::<T>();
                                    dp[j] = d;
                                    dot = dot + pij * d;
                                    for (dvv, &gg) in dv[off(j)..][..dh].iter_mut().zip(go) {
                                        *dvv = *dvv + pij * gg;
                                    }
                                }
                                // softmax backward, then the scaled dot product
                                for j in 0..seq {
                                    let pij = p[i * seq + j];
                                    if pij == T::zero() {
                                        continue;
                                    }
                                    let ds = pij * (dp[j] - dot) * scale;
                                    for t in 0..dh {
                                        dq[off(i) + t] = dq[off(i) + t] + ds * kv[off(j) + t];
                                        dk[off(j) + t] = dk[off(j) + t] + ds * qv[off(i) + t];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let len = node.value.cols;
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ReverseTokens { x, seq } => {
                    let (rows, n) = node.value.shape();
                    let mut dx = vec![T::zero(); rows * n];
                    for b in 0..rows / seq {
                        for i in 0..*seq {
                            let src = (b * seq + (seq - 1 - i)) * n;
                            dx[(b * seq + i) * n..][..n].copy_from_slice(&g[src..src + n]);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CausalShift { h, ctx, seq } => {
                    let (rows, n) = node.value.shape();
                    let batch = rows / seq;
                    let mut dh = vec![T::zero(); rows * n];
                    let mut dc = vec![T::zero(); batch * n];
                    for b in 0..batch {
                        dc[b * n..(b + 1) * n].copy_from_slice(&g[b * seq * n..][..n]);
                        for i in 1..*seq {
                            dh[(b * seq + i - 1) * n..][..n].copy_from_slice(&g[(b * seq + i) * n..][..n]);
                        }
                    }
                    accumulate(&mut grads, *h, dh);
                    accumulate(&mut grads, *ctx, dc);
                }
                Op::GatherRows { table, ids } => {
                    let (trows, n) = self.shape(*table);
                    let mut dt = vec![T::zero(); trows * n];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..n {
                            dt[i * n + j] = dt[i * n + j] + g[r * n + j];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; len]);
                }
                Op::SumSq(x) => {
                    let two = T::lit(2.0);
                    let dx = self.value(*x).data.iter().map(|&v| two * v * g[0]).collect();
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        out
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
