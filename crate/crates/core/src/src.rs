//! Semantic representation compressor: an attention autoencoder that maps
//! token fields from `n` channels down to `d` channels and back.
//!
//! Encoder: positional embedding, `L` full-attention blocks at width `n`,
//! token-wise projection `n -> d`. Decoder: projection `d -> n`, positional
//! embedding, `L` blocks.

use crate::autodiff::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{stack_fields, unstack_fields, Linear, ParamBuilder, TransformerBlock};
use crate::real::Real;
use crate::rng;
use crate::tokenfield::TokenField;

#[derive(Clone, Debug, PartialEq)]
pub struct SrcConfig {
    /// Input channel count.
    pub n: usize,
    /// Compact channel count.
    pub d: usize,
    /// Transformer blocks on each side.
    pub blocks: usize,
    /// Attention width; must equal `n`.
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Positional table size (maximum token count).
    pub tokens: usize,
}

impl SrcConfig {
    /// Small default used for desk-scale runs.
    pub fn desk(tokens: usize) -> Self {
        Self { n: 64, d: 8, blocks: 2, width: 64, heads: 4, mlp_ratio: 4, tokens }
    }

    /// Full-scale shape (`n = 768`, `d = 32`, `L = 4`).
    pub fn full_scale(tokens: usize) -> Self {
        Self { n: 768, d: 32, blocks: 4, width: 768, heads: 12, mlp_ratio: 4, tokens }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("src: {m}")));
        if self.d == 0 || self.d > self.n {
            return bad("need 1 <= d <= n");
        }
        if self.blocks == 0 {
            return bad("need at least one block");
        }
        if self.width != self.n {
            return bad("width must equal n");
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("width must be divisible by heads");
        }
        if self.tokens == 0 || self.mlp_ratio == 0 {
            return bad("tokens and mlp_ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct SrcLayout {
    pos_enc: crate::autodiff::ParamId,
    encoder: Vec<TransformerBlock>,
    proj_down: Linear,
    proj_up: Linear,
    pos_dec: crate::autodiff::ParamId,
    decoder: Vec<TransformerBlock>,
}

/// Compressor parameters together with their layout.
#[derive(Clone, Debug)]
pub struct SrcModel<T: Real> {
    config: SrcConfig,
    params: ParamSet<T>,
    layout: SrcLayout,
}

impl<T: Real> SrcModel<T> {
    /// Fresh model: random attention/MLP weights, zeroed residual outputs and
    /// positional tables, random projections.
    pub fn new(config: SrcConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::substream(seed, &[0x5c]);
        let mut b = ParamBuilder { params: &mut params, rng: &mut r };
        let (n, d, w) = (config.n, config.d, config.width);
        let pos_enc = b.zeros("src.enc.pos", config.tokens, w);
        let encoder = (0..config.blocks)
            .map(|i| {
                TransformerBlock::new(
                    &mut b,
                    &format!("src.enc.block{i}"),
                    w,
                    config.heads,
                    config.mlp_ratio,
                    false,
                    true,
                )
            })
            .collect();
        let proj_down = Linear::new(&mut b, "src.proj_down", n, d, false);
        let proj_up = Linear::new(&mut b, "src.proj_up", d, n, false);
        let pos_dec = b.zeros("src.dec.pos", config.tokens, w);
        let decoder = (0..config.blocks)
            .map(|i| {
                TransformerBlock::new(
                    &mut b,
                    &format!("src.dec.block{i}"),
                    w,
                    config.heads,
                    config.mlp_ratio,
                    false,
                    true,
                )
            })
            .collect();
        let layout = SrcLayout { pos_enc, encoder, proj_down, proj_up, pos_dec, decoder };
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from stored parameters (names and shapes must match
    /// the layout implied by `config`).
    pub fn from_params(config: SrcConfig, stored: &ParamSet<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.assign_from(stored)?;
        Ok(model)
    }

    /// Sets the projections to a channel selector (`proj_down` keeps the
    /// first `d` channels, `proj_up` writes them back) with zero biases.
    pub fn set_selector_projections(&mut self) {
        let (n, d) = (self.config.n, self.config.d);
        let down = self.params.get_mut(self.layout.proj_down.weight);
        down.data.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..d {
            down.data[j * d + j] = T::one();
        }
        let up = self.params.get_mut(self.layout.proj_up.weight);
        up.data.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..d {
            up.data[j * n + j] = T::one();
        }
        for id in [self.layout.proj_down.bias, self.layout.proj_up.bias] {
            self.params.get_mut(id).data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn config(&self) -> &SrcConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> SrcModel<U> {
        SrcModel { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    fn check_seq(&self, seq: usize) -> Result<()> {
        if seq == 0 || seq > self.config.tokens {
            return Err(Error::shape(format!("{seq} tokens, positional table holds {}", self.config.tokens)));
        }
        Ok(())
    }

    /// Encoder on stacked `(batch * seq) × n` rows.
    pub fn encode_graph(&self, g: &mut Graph<'_, T>, x: Var, seq: usize) -> Var {
        let pos = g.param(self.layout.pos_enc);
        let mut h = g.add_positional(x, pos, seq);
        for block in &self.layout.encoder {
            h = block.forward(g, h, seq);
        }
        self.layout.proj_down.forward(g, h)
    }

    /// Decoder on stacked `(batch * seq) × d` rows.
    pub fn decode_graph(&self, g: &mut Graph<'_, T>, zc: Var, seq: usize) -> Var {
        let h = self.layout.proj_up.forward(g, zc);
        let pos = g.param(self.layout.pos_dec);
        let mut h = g.add_positional(h, pos, seq);
        for block in &self.layout.decoder {
            h = block.forward(g, h, seq);
        }
        h
    }

    fn run_batch(&self, fields: &[&TokenField<T>], channels: usize, encode: bool) -> Result<Vec<TokenField<T>>> {
        let Some(first) = fields.first() else { return Ok(Vec::new()) };
        let seq = first.n_tokens();
        self.check_seq(seq)?;
        if let Some(f) = fields.iter().find(|f| f.shape() != (seq, channels)) {
            return Err(Error::shape(format!("expected {seq}x{channels}, got {:?}", f.shape())));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(stack_fields(fields));
        let y = if encode { self.encode_graph(&mut g, x, seq) } else { self.decode_graph(&mut g, x, seq) };
        let out = g.value(y);
        if !out.is_finite() {
            return Err(Error::NumericalOverflow(if encode { "src_encode" } else { "src_decode" }));
        }
        Ok(unstack_fields(out, seq))
    }

    /// `N×n -> N×d`.
    pub fn encode(&self, z: &TokenField<T>) -> Result<TokenField<T>> {
        Ok(self.encode_batch(&[z])?.remove(0))
    }

    /// `N×d -> N×n`.
    pub fn decode(&self, zc: &TokenField<T>) -> Result<TokenField<T>> {
        Ok(self.decode_batch(&[zc])?.remove(0))
    }

    pub fn encode_batch(&self, fields: &[&TokenField<T>]) -> Result<Vec<TokenField<T>>> {
        self.run_batch(fields, self.config.n, true)
    }

    pub fn decode_batch(&self, fields: &[&TokenField<T>]) -> Result<Vec<TokenField<T>>> {
        self.run_batch(fields, self.config.d, false)
    }

    /// `decode(encode(z))` for a batch.
    pub fn round_trip_batch(&self, fields: &[&TokenField<T>]) -> Result<Vec<TokenField<T>>> {
        let enc = self.encode_batch(fields)?;
        let refs: Vec<&TokenField<T>> = enc.iter().collect();
        self.decode_batch(&refs)
    }

    /// Mean squared reconstruction error of `target` from `input` through
    /// encode then decode, as a graph node (stacked rows).
    pub fn reconstruction_loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        input: Tensor<T>,
        target: Tensor<T>,
        seq: usize,
    ) -> Var {
        let count = T::lit(target.len() as f64);
        let x = g.input(input);
        let t = g.input(target);
        let zc = self.encode_graph(g, x, seq);
        let zh = self.decode_graph(g, zc, seq);
        let diff = g.sub(zh, t);
        let sq = g.sum_sq(diff);
        g.scale(sq, T::one() / count)
    }
}

/// Mean squared error over all entries.
pub fn src_loss<T: Real>(z: &TokenField<T>, z_hat: &TokenField<T>) -> Result<T> {
    if z.shape() != z_hat.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", z.shape(), z_hat.shape())));
    }
    let sum = z.as_slice().iter().zip(z_hat.as_slice()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
    Ok(sum / T::lit(z.as_slice().len() as f64))
}

/// Mean squared error pooled over a set of field pairs.
pub fn mean_reconstruction_error<T: Real>(clean: &[TokenField<T>], recon: &[TokenField<T>]) -> Result<f64> {
    if clean.len() != recon.len() || clean.is_empty() {
        return Err(Error::shape("reconstruction sets differ in length"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in clean.iter().zip(recon) {
        sum += src_loss(a, b)?.as_f64() * a.as_slice().len() as f64;
        count += a.as_slice().len();
    }
    Ok(sum / count as f64)
}
