//! Layers shared by the backbones and the captioning heads.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};

/// Affine map `x·W + b` with `W: d_in × d_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        trainable: bool,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            d_in,
            d_out,
            Init::Normal(std),
            trainable,
            rng,
        )?;
        let bias = store.add(&format!("{name}.bias"), 1, d_out, Init::Zeros, trainable, rng)?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    /// Weights plus bias.
    pub const fn param_count(d_in: usize, d_out: usize) -> u64 {
        (d_in * d_out + d_out) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        trainable: bool,
    ) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), 1, dim, Init::Ones, trainable, rng)?;
        let bias = store.add(&format!("{name}.bias"), 1, dim, Init::Zeros, trainable, rng)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.normalize(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let h = g.mul_row(n, gain);
        g.add_row(h, bias)
    }
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from one sequence and keys/values from another (the same
/// one for self-attention). The output has the query sequence's width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_query: usize,
        d_context: usize,
        d_model: usize,
        heads: usize,
        std: f64,
        trainable: bool,
    ) -> Result<Self> {
        assert!(heads > 0 && d_model % heads == 0, "heads must divide d_model");
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d_query, d_model, std, trainable)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d_context, d_model, std, trainable)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d_context, d_model, std, trainable)?,
            o: Linear::new(store, rng, &format!("{name}.o"), d_model, d_query, std, trainable)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var, causal: bool) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let d_model = self.q.d_out;
        let dh = d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, (h + 1) * dh),
                    g.slice_cols(k, h * dh, (h + 1) * dh),
                    g.slice_cols(v, h * dh, (h + 1) * dh),
                )
            };
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s, causal);
            outs.push(g.matmul(p, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.o.forward(g, merged)
    }

    pub const fn param_count(d_query: usize, d_context: usize, d_model: usize) -> u64 {
        Linear::param_count(d_query, d_model)
            + 2 * Linear::param_count(d_context, d_model)
            + Linear::param_count(d_model, d_query)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        std: f64,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), dim, trainable)?,
            attn: Attention::new(
                store,
                rng,
                &format!("{name}.attn"),
                dim,
                dim,
                dim,
                heads,
                std,
                trainable,
            )?,
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), dim, trainable)?,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, std, trainable)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, std, trainable)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, causal);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}
