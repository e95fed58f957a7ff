//! Multi-head self-attention and the position-wise MLP.

use rand::Rng;

use crate::graph::Var;
use crate::nn::{Ctx, Linear, ParamStore};
use crate::tensor::Result;

/// Query, key, value and output projections of one attention layer.
#[derive(Debug, Clone)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Projections {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Projections {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true, false),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, true, false),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true, false),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, true, false),
        }
    }

    pub fn param_count(d: usize) -> usize {
        4 * Linear::param_count(d, d, true)
    }

    /// Per-head projections `[B·h, n, d/h]` of a `[B, n, d]` input.
    pub fn split_qkv(&self, ctx: &mut Ctx, x: Var, heads: usize) -> Result<(Var, Var, Var)> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        Ok((
            ctx.g.split_heads(q, heads)?,
            ctx.g.split_heads(k, heads)?,
            ctx.g.split_heads(v, heads)?,
        ))
    }

    /// Concatenates heads back to `[B, n, d]` and applies the output projection.
    pub fn merge_out(&self, ctx: &mut Ctx, heads_out: Var, heads: usize) -> Result<Var> {
        let merged = ctx.g.merge_heads(heads_out, heads)?;
        self.o.forward(ctx, merged)
    }
}

/// `softmax(Q·Kᵀ / √d_h)·V` per head.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub proj: Projections,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// `[B·h, n, n]` attention weights.
    pub weights: Var,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        SelfAttention {
            proj: Projections::new(store, rng, name, d),
            heads,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<AttentionOutput> {
        let (q, k, v) = self.proj.split_qkv(ctx, x, self.heads)?;
        let dh = ctx.g.shape(q)[2];
        let kt = ctx.g.transpose(k)?;
        let scores = ctx.g.bmm(q, kt)?;
        let scores = ctx.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = ctx.g.softmax_rows(scores)?;
        let heads_out = ctx.g.bmm(weights, v)?;
        let out = self.proj.merge_out(ctx, heads_out, self.heads)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// `d → ratio·d → d` with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, true, false),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d, true, false),
        }
    }

    pub fn param_count(d: usize, hidden: usize) -> usize {
        Linear::param_count(d, hidden, true) + Linear::param_count(hidden, d, true)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.gelu(h);
        self.fc2.forward(ctx, h)
    }
}
