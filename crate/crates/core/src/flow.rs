//! Transformer autoregressive flow.
//!
//! `K` affine blocks. Inside block `k`, a causal transformer reads the class
//! (or null) embedding plus a start token followed by tokens `0..N-1` and
//! predicts a shift `mu_i` and log-scale `alpha_i` for every token `i` from
//! tokens `< i` only. Each block maps `y -> (y - mu) * exp(-alpha)` and the
//! token order is reversed after every block, so the Jacobian of each block
//! is triangular with log-determinant `-sum(alpha)`.

use rayon::prelude::*;

use crate::autodiff::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{stack_fields, unstack_fields, KvCache, LayerNorm, Linear, ParamBuilder, TransformerBlock};
use crate::real::Real;
use crate::rng;
use crate::tokenfield::TokenField;

/// Class label; `None` selects the null (unconditional) embedding.
pub type Label = Option<u32>;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Number of affine blocks `K`.
    pub blocks: usize,
    /// Transformer depth of blocks `0..K-1`.
    pub shallow_layers: usize,
    /// Transformer depth of the last block.
    pub deep_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Modeled channel count `d`.
    pub channels: usize,
    /// Token count `N`.
    pub tokens: usize,
    pub num_classes: usize,
    pub label_drop_p: f64,
    pub alpha_clamp: f64,
}

impl FlowConfig {
    /// Deep-shallow desk default: six blocks, one layer each except a
    /// four-layer final block.
    pub fn desk(tokens: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            blocks: 6,
            shallow_layers: 1,
            deep_layers: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            channels,
            tokens,
            num_classes,
            label_drop_p: 0.1,
            alpha_clamp: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("flow: {m}")));
        if self.blocks == 0 {
            return bad("need at least one block");
        }
        if self.shallow_layers == 0 || self.deep_layers < self.shallow_layers {
            return bad("need deep_layers >= shallow_layers >= 1");
        }
        if !(0.0..1.0).contains(&self.label_drop_p) {
            return bad("label_drop_p must lie in [0, 1)");
        }
        if !(self.alpha_clamp > 0.0 && self.alpha_clamp.is_finite()) {
            return bad("alpha_clamp must be positive");
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("width must be divisible by heads");
        }
        if self.channels == 0 || self.tokens == 0 || self.mlp_ratio == 0 {
            return bad("channels, tokens and mlp_ratio must be positive");
        }
        Ok(())
    }

    fn layers_of(&self, block: usize) -> usize {
        if block + 1 == self.blocks {
            self.deep_layers
        } else {
            self.shallow_layers
        }
    }

    /// Dimension `N * d` of one modeled field.
    pub fn dims(&self) -> usize {
        self.tokens * self.channels
    }
}

/// Per-token shift and log-scale of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub mu: TokenField<T>,
    pub alpha: TokenField<T>,
}

/// Classifier-free guidance strength; `w = 0` disables guidance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub w: f64,
}

impl GuidanceSpec {
    pub const NONE: GuidanceSpec = GuidanceSpec { w: 0.0 };

    pub fn new(w: f64) -> Result<Self> {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Config(format!("guidance strength {w} must be finite and >= 0")));
        }
        Ok(Self { w })
    }
}

/// Data-to-prior step: `(y - mu) * exp(-alpha)`.
#[inline]
pub fn affine_forward<T: Real>(y: T, mu: T, alpha: T) -> T {
    (y - mu) * (-alpha).exp()
}

/// Prior-to-data step: `u * exp(alpha) + mu`.
#[inline]
pub fn affine_inverse<T: Real>(u: T, mu: T, alpha: T) -> T {
    u * alpha.exp() + mu
}

/// Linear extrapolation from the unconditional towards the conditional
/// parameters with factor `1 + w`; `alpha` is re-clamped to `±clamp`.
pub fn cfg_combine<T: Real>(
    cond: &AffineParams<T>,
    uncond: &AffineParams<T>,
    w: f64,
    clamp: f64,
) -> Result<AffineParams<T>> {
    if cond.mu.shape() != uncond.mu.shape() || cond.alpha.shape() != uncond.alpha.shape() {
        return Err(Error::shape("guidance parameter shapes differ"));
    }
    if w == 0.0 {
        return Ok(cond.clone());
    }
    let f = T::lit(1.0 + w);
    let c = T::lit(clamp);
    let mix = |a: &TokenField<T>, b: &TokenField<T>, clip: bool| {
        let data = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&ca, &ub)| {
                let v = ub + f * (ca - ub);
                if clip {
                    v.max(-c).min(c)
                } else {
                    v
                }
            })
            .collect();
        TokenField::new(a.n_tokens(), a.channels(), data)
    };
    Ok(AffineParams { mu: mix(&cond.mu, &uncond.mu, false)?, alpha: mix(&cond.alpha, &uncond.alpha, true)? })
}

#[derive(Clone, Debug)]
struct FlowBlock {
    in_proj: Linear,
    pos: ParamId,
    class_emb: ParamId,
    start: ParamId,
    layers: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    head: Linear,
}

/// Graph nodes of one batched forward pass.
pub struct FlowTrace {
    /// Prior-space output (stacked rows).
    pub u: Var,
    /// Log-scales of every block (stacked rows).
    pub alphas: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FlowModel<T: Real> {
    config: FlowConfig,
    params: ParamSet<T>,
    blocks: Vec<FlowBlock>,
}

impl<T: Real> FlowModel<T> {
    /// Fresh model with zero-initialized output heads (an identity flow up to
    /// the token reversals).
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::substream(seed, &[0xf1]);
        let mut b = ParamBuilder { params: &mut params, rng: &mut r };
        let (w, d) = (config.width, config.channels);
        let blocks = (0..config.blocks)
            .map(|k| {
                let name = format!("flow.block{k}");
                FlowBlock {
                    in_proj: Linear::new(&mut b, &format!("{name}.in_proj"), d, w, false),
                    pos: b.normal(&format!("{name}.pos"), config.tokens, w, 0.1),
                    class_emb: b.normal(&format!("{name}.class_emb"), config.num_classes + 1, w, 1.0),
                    start: b.zeros(&format!("{name}.start"), 1, w),
                    layers: (0..config.layers_of(k))
                        .map(|l| {
                            TransformerBlock::new(
                                &mut b,
                                &format!("{name}.layer{l}"),
                                w,
                                config.heads,
                                config.mlp_ratio,
                                true,
                                false,
                            )
                        })
                        .collect(),
                    final_ln: LayerNorm::new(&mut b, &format!("{name}.final_ln"), w),
                    head: Linear::new(&mut b, &format!("{name}.head"), w, 2 * d, true),
                }
            })
            .collect();
        Ok(Self { config, params, blocks })
    }

    /// Model whose heads are also random (`std` scales the head weights), so
    /// every block is a non-trivial transform.
    pub fn random(config: FlowConfig, seed: u64, std: f64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        let mut r = rng::substream(seed, &[0x4ead]);
        let width = m.config.width as f64;
        for k in 0..m.blocks.len() {
            let head = m.blocks[k].head;
            for id in [head.weight, head.bias] {
                let scale = if id == head.weight { std / width.sqrt() } else { std };
                for v in m.params.get_mut(id).data.iter_mut() {
                    *v = T::lit(scale * rand::Rng::sample::<f64, _>(&mut r, rand_distr::StandardNormal));
                }
            }
        }
        Ok(m)
    }

    pub fn from_params(config: FlowConfig, stored: &ParamSet<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.assign_from(stored)?;
        Ok(m)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        FlowModel { config: self.config.clone(), params: self.params.cast(), blocks: self.blocks.clone() }
    }

    /// Makes block `k` emit constant `(mu, alpha)` per channel regardless of
    /// its input.
    pub fn set_constant_affine(&mut self, k: usize, mu: &[f64], alpha: &[f64]) {
        let d = self.config.channels;
        assert!(mu.len() == d && alpha.len() == d);
        let c = self.config.alpha_clamp;
        let head = self.blocks[k].head;
        self.params.get_mut(head.weight).data.iter_mut().for_each(|v| *v = T::zero());
        let bias = &mut self.params.get_mut(head.bias).data;
        for j in 0..d {
            bias[j] = T::lit(mu[j]);
            bias[d + j] = T::lit(c * (alpha[j] / c).atanh());
        }
    }

    pub(crate) fn label_index(&self, label: Label) -> Result<usize> {
        match label {
            None => Ok(self.config.num_classes),
            Some(c) if (c as usize) < self.config.num_classes => Ok(c as usize),
            Some(c) => Err(Error::UnknownLabel(c)),
        }
    }

    pub(crate) fn label_indices(&self, labels: &[Label]) -> Result<Vec<usize>> {
        labels.iter().map(|&l| self.label_index(l)).collect()
    }

    fn check_fields(&self, fields: &[&TokenField<T>], seq: usize) -> Result<()> {
        let want = (seq, self.config.channels);
        if let Some(f) = fields.iter().find(|f| f.shape() != want) {
            return Err(Error::shape(format!("expected {want:?}, got {:?}", f.shape())));
        }
        Ok(())
    }

    /// Shift and log-scale of block `k` for stacked sequences of length
    /// `seq <= N`.
    pub fn block_params_graph(
        &self,
        g: &mut Graph<'_, T>,
        k: usize,
        y: Var,
        labels: &[usize],
        seq: usize,
    ) -> (Var, Var) {
        let blk = &self.blocks[k];
        let d = self.config.channels;
        let h = blk.in_proj.forward(g, y);
        let table = g.param(blk.class_emb);
        let start = g.param(blk.start);
        let ctx = g.gather_rows(table, labels);
        let ctx = g.add_row(ctx, start);
        let x = g.causal_shift(h, ctx, seq);
        let pos = g.param(blk.pos);
        let mut x = g.add_positional(x, pos, seq);
        for layer in &blk.layers {
            x = layer.forward(g, x, seq);
        }
        let x = blk.final_ln.forward(g, x);
        let out = blk.head.forward(g, x);
        let mu = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        let alpha = g.soft_clamp(raw, T::lit(self.config.alpha_clamp));
        (mu, alpha)
    }

    /// `(mu, alpha)` of block `k` at position `i` for one row per sequence,
    /// given token `i - 1` of each sequence (`None` at `i = 0`). Extends the
    /// per-layer caches by one position.
    fn block_step(
        &self,
        k: usize,
        i: usize,
        prev: Option<Tensor<T>>,
        labels: &[usize],
        caches: &mut [KvCache<T>],
    ) -> (Tensor<T>, Tensor<T>) {
        let blk = &self.blocks[k];
        let (n, d) = (self.config.tokens, self.config.channels);
        let mut g = Graph::new(&self.params);
        let x = match prev {
            None => {
                let table = g.param(blk.class_emb);
                let start = g.param(blk.start);
                let ctx = g.gather_rows(table, labels);
                g.add_row(ctx, start)
            }
            Some(t) => {
                let y = g.input(t);
                blk.in_proj.forward(&mut g, y)
            }
        };
        let pos = g.param(blk.pos);
        let row = g.value(pos).row(i).to_vec();
        let row = g.input(Tensor::new(1, row.len(), row));
        let mut x = g.add_row(x, row);
        for (layer, cache) in blk.layers.iter().zip(caches.iter_mut()) {
            x = layer.step(&mut g, x, cache, n, i);
        }
        let x = blk.final_ln.forward(&mut g, x);
        let out = blk.head.forward(&mut g, x);
        let mu = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        let alpha = g.soft_clamp(raw, T::lit(self.config.alpha_clamp));
        (g.value(mu).clone(), g.value(alpha).clone())
    }

    /// Full data-to-prior pass on stacked rows (`labels` already resolved to
    /// embedding rows).
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, y: Var, labels: &[usize]) -> FlowTrace {
        let seq = self.config.tokens;
        let mut y = y;
        let mut alphas = Vec::with_capacity(self.blocks.len());
        for k in 0..self.blocks.len() {
            let (mu, alpha) = self.block_params_graph(g, k, y, labels, seq);
            let neg = g.scale(alpha, -T::one());
            let scale = g.exp(neg);
            let centered = g.sub(y, mu);
            let u = g.mul(centered, scale);
            y = g.reverse_tokens(u, seq);
            alphas.push(alpha);
        }
        FlowTrace { u: y, alphas }
    }

    /// Mean `L_NF` per modeled dimension over the batch, as a graph node.
    pub fn loss_graph(&self, g: &mut Graph<'_, T>, fields: &[&TokenField<T>], labels: &[usize]) -> (Var, FlowTrace) {
        let y = g.input(stack_fields(fields));
        let trace = self.forward_graph(g, y, labels);
        let mut total = g.sum_sq(trace.u);
        total = g.scale(total, T::lit(0.5));
        for &a in &trace.alphas {
            let s = g.sum(a);
            total = g.add(total, s);
        }
        let denom = (fields.len() * self.config.dims()) as f64;
        (g.scale(total, T::lit(1.0 / denom)), trace)
    }

    /// `(mu, alpha)` of block `k` for one field.
    pub fn block_params(&self, field: &TokenField<T>, label: Label, k: usize) -> Result<AffineParams<T>> {
        if k >= self.blocks.len() {
            return Err(Error::shape(format!("block {k} of {}", self.blocks.len())));
        }
        let seq = field.n_tokens();
        if seq > self.config.tokens {
            return Err(Error::shape(format!("{seq} tokens exceed N = {}", self.config.tokens)));
        }
        self.check_fields(&[field], seq)?;
        let idx = [self.label_index(label)?];
        let mut g = Graph::new(&self.params);
        let y = g.input(stack_fields(&[field]));
        let (mu, alpha) = self.block_params_graph(&mut g, k, y, &idx, seq);
        let d = self.config.channels;
        Ok(AffineParams {
            mu: TokenField::new(seq, d, g.value(mu).data.clone())?,
            alpha: TokenField::new(seq, d, g.value(alpha).data.clone())?,
        })
    }

    /// Prior-space image and log|det| for a batch of fields.
    pub fn forward_batch(&self, fields: &[&TokenField<T>], labels: &[Label]) -> Result<Vec<(TokenField<T>, T)>> {
        if fields.len() != labels.len() {
            return Err(Error::shape("one label per field required"));
        }
        if fields.is_empty() {
            return Ok(Vec::new());
        }
        self.check_fields(fields, self.config.tokens)?;
        let idx = self.label_indices(labels)?;
        let mut g = Graph::new(&self.params);
        let y = g.input(stack_fields(fields));
        let trace = self.forward_graph(&mut g, y, &idx);
        let u = g.value(trace.u);
        if !u.is_finite() {
            return Err(Error::NumericalOverflow("flow_forward"));
        }
        let per = self.config.dims();
        let mut logdets = vec![T::zero(); fields.len()];
        for &a in &trace.alphas {
            for (b, chunk) in g.value(a).data.chunks(per).enumerate() {
                logdets[b] = logdets[b] - chunk.iter().copied().sum::<T>();
            }
        }
        Ok(unstack_fields(u, self.config.tokens).into_iter().zip(logdets).collect())
    }

    /// `u = f(field)` and `log|det df/dfield|`.
    pub fn flow_forward(&self, field: &TokenField<T>, label: Label) -> Result<(TokenField<T>, T)> {
        Ok(self.forward_batch(&[field], &[label])?.remove(0))
    }

    /// `L_NF = ½‖u‖² - logdet` for each field.
    pub fn nll_batch(&self, fields: &[&TokenField<T>], labels: &[Label]) -> Result<Vec<T>> {
        let half = T::lit(0.5);
        Ok(self
            .forward_batch(fields, labels)?
            .into_iter()
            .map(|(u, logdet)| half * u.as_slice().iter().map(|&v| v * v).sum::<T>() - logdet)
            .collect())
    }

    pub fn nll(&self, field: &TokenField<T>, label: Label) -> Result<T> {
        Ok(self.nll_batch(&[field], &[label])?.remove(0))
    }

    /// Full negative log-likelihood per dimension, including the Gaussian
    /// normalizer, for each field.
    pub fn full_nll_per_dim(&self, fields: &[&TokenField<T>], labels: &[Label]) -> Result<Vec<f64>> {
        let dims = self.config.dims() as f64;
        let constant = 0.5 * dims * (2.0 * std::f64::consts::PI).ln();
        Ok(self.nll_batch(fields, labels)?.into_iter().map(|l| (l.as_f64() + constant) / dims).collect())
    }

    /// Prior-to-data map for a batch; tokens are generated one at a time
    /// inside each block, blocks in reverse order.
    pub fn inverse_batch(
        &self,
        us: &[&TokenField<T>],
        labels: &[Label],
        guidance: GuidanceSpec,
    ) -> Result<Vec<TokenField<T>>> {
        if us.len() != labels.len() {
            return Err(Error::shape("one label per field required"));
        }
        if us.is_empty() {
            return Ok(Vec::new());
        }
        let (n, d) = (self.config.tokens, self.config.channels);
        self.check_fields(us, n)?;
        GuidanceSpec::new(guidance.w)?;
        let batch = us.len();
        let cond_idx = self.label_indices(labels)?;
        let guided = guidance.w != 0.0;
        let null = self.config.num_classes;
        let mut idx = cond_idx.clone();
        if guided {
            idx.extend(std::iter::repeat_n(null, batch));
        }
        let rows = idx.len();

        let mut current: Vec<TokenField<T>> = us.iter().map(|u| (*u).clone()).collect();
        for k in (0..self.blocks.len()).rev() {
            // undo the reversal that followed block k
            let targets: Vec<TokenField<T>> = current.iter().map(TokenField::reversed_tokens).collect();
            let mut y = vec![T::zero(); batch * n * d];
            let mut caches: Vec<KvCache<T>> =
                self.blocks[k].layers.iter().map(|_| KvCache::new(rows, n, self.config.width)).collect();
            for i in 0..n {
                let prev = (i > 0).then(|| {
                    let mut t = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        let b = r % batch;
                        t.extend_from_slice(&y[(b * n + i - 1) * d..][..d]);
                    }
                    Tensor::new(rows, d, t)
                });
                let (mu, alpha) = self.block_step(k, i, prev, &idx, &mut caches);
                let (mu, alpha) = (&mu, &alpha);
                for b in 0..batch {
                    let at = |t: &Tensor<T>, r: usize| t.row(r).to_vec();
                    let cond = AffineParams {
                        mu: TokenField::from_parts_unchecked(1, d, at(mu, b)),
                        alpha: TokenField::from_parts_unchecked(1, d, at(alpha, b)),
                    };
                    let p = if guided {
                        let uncond = AffineParams {
                            mu: TokenField::from_parts_unchecked(1, d, at(mu, batch + b)),
                            alpha: TokenField::from_parts_unchecked(1, d, at(alpha, batch + b)),
                        };
                        cfg_combine(&cond, &uncond, guidance.w, self.config.alpha_clamp)?
                    } else {
                        cond
                    };
                    let target = targets[b].token(i);
                    for j in 0..d {
                        let v = affine_inverse(target[j], p.mu.get(0, j), p.alpha.get(0, j));
                        if !v.is_finite() {
                            return Err(Error::NumericalOverflow("flow_inverse"));
                        }
                        y[(b * n + i) * d + j] = v;
                    }
                }
            }
            current = y.chunks(n * d).map(|c| TokenField::from_parts_unchecked(n, d, c.to_vec())).collect();
        }
        Ok(current)
    }

    pub fn flow_inverse(&self, u: &TokenField<T>, label: Label, guidance: GuidanceSpec) -> Result<TokenField<T>> {
        Ok(self.inverse_batch(&[u], &[label], guidance)?.remove(0))
    }

    /// Draws `count` prior samples and maps them to data space, in chunks
    /// processed in parallel. Deterministic in `seed`.
    pub fn sample(&self, count: usize, label: Label, guidance: GuidanceSpec, seed: u64) -> Result<Vec<TokenField<T>>> {
        const CHUNK: usize = 256;
        let (n, d) = (self.config.tokens, self.config.channels);
        let chunks: Vec<usize> = (0..count.div_ceil(CHUNK)).collect();
        let out: Result<Vec<Vec<TokenField<T>>>> = chunks
            .par_iter()
            .map(|&c| {
                let len = CHUNK.min(count - c * CHUNK);
                let mut r = rng::substream(seed, &[0x5a, c as u64]);
                let us: Vec<TokenField<T>> =
                    (0..len).map(|_| crate::tokenfield::standard_normal_field(n, d, &mut r)).collect();
                let refs: Vec<&TokenField<T>> = us.iter().collect();
                self.inverse_batch(&refs, &vec![label; len], guidance)
            })
            .collect();
        Ok(out?.into_iter().flatten().collect())
    }
}
