//! Building blocks shared by the compressor and the flow.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::real::Real;
use crate::rng::StreamRng;

pub const LN_EPS: f64 = 1e-6;

/// Registers named parameters with seeded initializers.
pub struct ParamBuilder<'a, T: Real> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut StreamRng,
}

impl<T: Real> ParamBuilder<'_, T> {
    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.params.add(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.params.add(name, Tensor::filled(rows, cols, T::one()))
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| T::lit(std * self.rng.sample::<f64, _>(StandardNormal))).collect();
        self.params.add(name, Tensor::new(rows, cols, data))
    }

    /// Gaussian weights with variance `1 / fan_in`.
    pub fn fan_in(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.normal(name, rows, cols, 1.0 / (rows as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, inp: usize, out: usize, zero: bool) -> Self {
        let weight = if zero {
            b.zeros(&format!("{name}.weight"), inp, out)
        } else {
            b.fan_in(&format!("{name}.weight"), inp, out)
        };
        let bias = b.zeros(&format!("{name}.bias"), 1, out);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, width: usize) -> Self {
        Self { gamma: b.ones(&format!("{name}.gamma"), 1, width), beta: b.zeros(&format!("{name}.beta"), 1, width) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
    }
}

/// Pre-norm residual transformer block:
/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl TransformerBlock {
    /// With `zero_residual`, the output projection of both residual branches
    /// starts at zero so the block is the identity map.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        causal: bool,
        zero_residual: bool,
    ) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        let hidden = width * mlp_ratio.max(1);
        Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), width),
            q: Linear::new(b, &format!("{name}.attn.q"), width, width, false),
            k: Linear::new(b, &format!("{name}.attn.k"), width, width, false),
            v: Linear::new(b, &format!("{name}.attn.v"), width, width, false),
            out: Linear::new(b, &format!("{name}.attn.out"), width, width, zero_residual),
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), width),
            fc1: Linear::new(b, &format!("{name}.mlp.fc1"), width, hidden, false),
            fc2: Linear::new(b, &format!("{name}.mlp.fc2"), hidden, width, zero_residual),
            heads,
            causal,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, seq: usize) -> Var {
        let h = self.ln1.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let a = g.attention(q, k, v, seq, self.heads, self.causal);
        let a = self.out.forward(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }

    /// One causal position `i` for every sequence in `x` (one row each).
    /// Keys and values of this position are written into `cache`, which
    /// holds earlier positions of each row, laid out `[row][token][width]`
    /// with `seq` tokens per row.
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, cache: &mut KvCache<T>, seq: usize, i: usize) -> Var {
        assert!(self.causal, "cached steps need a causal block");
        let h = self.ln1.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let (rows, width) = g.shape(q);
        for r in 0..rows {
            let at = (r * seq + i) * width;
            cache.keys[at..at + width].copy_from_slice(g.value(k).row(r));
            cache.values[at..at + width].copy_from_slice(g.value(v).row(r));
        }
        let a = cached_attention(g.value(q), cache, seq, i, self.heads);
        let a = g.input(a);
        let a = self.out.forward(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

/// Keys and values of one transformer layer for a batch of sequences.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Real> KvCache<T> {
    pub fn new(rows: usize, seq: usize, width: usize) -> Self {
        Self { keys: vec![T::zero(); rows * seq * width], values: vec![T::zero(); rows * seq * width] }
    }
}

/// Attention of query rows at position `i` over cached positions `0..=i`,
/// accumulated in the same order as [`Graph::attention`].
fn cached_attention<T: Real>(q: &Tensor<T>, cache: &KvCache<T>, seq: usize, i: usize, heads: usize) -> Tensor<T> {
    let (rows, width) = q.shape();
    let dh = width / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); rows * width];
    let mut p = vec![T::zero(); i + 1];
    for r in 0..rows {
        for h in 0..heads {
            let qi = &q.row(r)[h * dh..][..dh];
            let mut max = T::neg_infinity();
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &cache.keys[(r * seq + j) * width + h * dh..][..dh];
                *pj = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                max = max.max(*pj);
            }
            let mut denom = T::zero();
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                denom = denom + *pj;
            }
            let o = &mut out[r * width + h * dh..][..dh];
            for (j, &pj) in p.iter().enumerate() {
                let w = pj / denom;
                let vj = &cache.values[(r * seq + j) * width + h * dh..][..dh];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo = *oo + w * vv;
                }
            }
        }
    }
    Tensor::new(rows, width, out)
}

/// Stacks token fields row-wise into one `(batch * N) × c` tensor.
pub fn stack_fields<T: Real>(fields: &[&crate::tokenfield::TokenField<T>]) -> Tensor<T> {
    let (n, c) = fields[0].shape();
    let mut data = Vec::with_capacity(fields.len() * n * c);
    for f in fields {
        assert_eq!(f.shape(), (n, c), "batched fields must share a shape");
        data.extend_from_slice(f.as_slice());
    }
    Tensor::new(fields.len() * n, c, data)
}

/// Splits a stacked tensor back into `rows / seq` fields.
pub fn unstack_fields<T: Real>(t: &Tensor<T>, seq: usize) -> Vec<crate::tokenfield::TokenField<T>> {
    t.data
        .chunks(seq * t.cols)
        .map(|chunk| crate::tokenfield::TokenField::from_parts_unchecked(seq, t.cols, chunk.to_vec()))
        .collect()
}
