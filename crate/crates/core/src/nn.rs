//! Parameter storage and the small layer building blocks shared by the
//! encoder, the attention blocks and the heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor};

/// Standard deviation of the truncated-normal initialiser.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Every tensor of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Truncated normal on `[-2σ, 2σ]`, by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names and the bit patterns of all values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Hash of the frozen tensors only.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.frozen) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Ctx<'p> {
    pub g: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Ctx<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Leaf for parameter `id`, created on first use. Frozen parameters do not require grad.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.g.leaf(p.value.clone(), !p.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound, trainable parameter after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.g.grad(v).map(|t| (ParamId(i), t.clone()))
            })
            .collect()
    }
}

/// Affine map on the last axis: `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        frozen: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(rng, &[in_dim, out_dim], INIT_STD),
            frozen,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), frozen));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }

    /// Applies to any tensor whose last axis is `in_dim`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        let rows = ctx.g.value(x).numel() / last.max(1);
        let flat = if shape.len() == 2 {
            x
        } else {
            ctx.g.reshape(x, &[rows, last])?
        };
        let w = ctx.p(self.weight);
        let mut y = ctx.g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = ctx.p(b);
            y = ctx.g.add(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("non-empty") = self.out_dim;
            ctx.g.reshape(y, &out_shape)
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.p(self.gain);
        let b = ctx.p(self.bias);
        ctx.g.layer_norm(x, g, b, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = trunc_normal(&mut rng, &[1000], INIT_STD);
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "frozen", 3, 2, true, true);
        let mut ctx = Ctx::new(&store);
        let x = ctx.g.leaf(Tensor::full(&[4, 3], 1.0), true);
        let y = lin.forward(&mut ctx, x).unwrap();
        let s = ctx.g.sum(y);
        ctx.g.backward(s).unwrap();
        assert!(ctx.param_grads().is_empty());
        assert!(ctx.g.grad(x).is_some());
    }

    #[test]
    fn linear_handles_rank3() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 5, 7, true, false);
        let mut ctx = Ctx::new(&store);
        let x = ctx.g.constant(Tensor::full(&[2, 3, 5], 0.5));
        let y = lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 3, 7]);
        assert_eq!(store.total_count(), Linear::param_count(5, 7, true));
    }
}
