//! Central finite-difference checks of the autodiff engine.
//!
//! The error of one tensor's gradient is `max_i |a_i - n_i| / max(‖a‖∞, ‖n‖∞, s)`
//! where `a` is the autodiff gradient, `n` the central difference with step `h`
//! and `s = max(1e-3·G, 1e-6)` with `G` the largest analytic gradient entry over
//! every checked tensor. The floor keeps tensors whose gradient is structurally
//! zero (a key bias under softmax) from being judged on round-off alone.
//! GRLs are bypassed during checks since finite differences only see the forward pass.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::SelfAttention;
use crate::dtab::{dta_head, ib_loss, token_labels, DtabAttention, DtabBlock, DtabConfig, DtabTrain, FeatureQueue, Mdta, PatchDiscriminator};
use crate::encoder::{Encoder, EncoderConfig, Pass, PositionalEmbedding, StandardBlock};
use crate::features::Domain;
use crate::graph::Var;
use crate::heads::{
    loss_adv, loss_cls, loss_soft_entropy, total_loss, AdversarialHead, ClassifierConfig, ClassifierHead, LossParts,
    LossWeights,
};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;
const SCALE_FLOOR: f64 = 1e-6;
const GLOBAL_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn forward_value<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::new(store);
    ctx.g.set_grl_bypass(true);
    let out = f(&mut ctx)?;
    Ok(ctx.g.value(out).item())
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// trainable tensor in `store`. At most `max_coords` coordinates per tensor
/// are probed (chosen with `rng`); `None` probes them all.
pub fn check_store<F, R>(
    name: &str,
    store: &mut ParamStore,
    f: F,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheck>
where
    F: Fn(&mut Ctx) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic: Vec<(ParamId, Tensor)> = {
        let mut ctx = Ctx::new(store);
        ctx.g.set_grl_bypass(true);
        let out = f(&mut ctx)?;
        ctx.g.backward(out)?;
        ctx.param_grads()
    };
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    let global = analytic
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (GLOBAL_FRACTION * global).max(SCALE_FLOOR);
    let mut worst: f64 = 0.0;
    let mut coords_checked = 0;
    for id in ids {
        let n = store.get(id).value.numel();
        let grad = analytic
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = store.get(id).value.data()[c];
            store.value_mut(id).data_mut()[c] = orig + h;
            let fp = forward_value(store, &f)?;
            store.value_mut(id).data_mut()[c] = orig - h;
            let fm = forward_value(store, &f)?;
            store.value_mut(id).data_mut()[c] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        let an: Vec<f64> = coords.iter().map(|&c| grad[c]).collect();
        let scale = an
            .iter()
            .chain(&numeric)
            .fold(floor, |m, v| m.max(v.abs()));
        let err = an
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
        coords_checked += coords.len();
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        coords_checked,
    })
}

/// Gradient check of `f` over free-standing input tensors.
pub fn check_inputs<F, R>(name: &str, inputs: &[Tensor], f: F, rng: &mut R) -> Result<GradCheck>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone(), false))
        .collect();
    check_store(
        name,
        &mut store,
        |ctx| {
            let vars: Vec<Var> = ids.iter().map(|&id| ctx.p(id)).collect();
            f(ctx, &vars)
        },
        DEFAULT_STEP,
        None,
        rng,
    )
}

/// Uniform random tensor in `[-scale, scale]`.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Groups of checks runnable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Encoder,
    Dtab,
    Heads,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Encoder, Scope::Dtab, Scope::Heads];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Encoder => "encoder",
            Scope::Dtab => "dtab",
            Scope::Heads => "heads",
        })
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scope::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| format!("unknown scope {s:?} (expected ops, encoder, dtab or heads)"))
    }
}

/// Sums `out` against fixed, position-dependent weights so that every output
/// element reaches the scalar with a distinct coefficient.
pub fn probe(ctx: &mut Ctx, out: Var) -> Result<Var> {
    let shape = ctx.g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.7311 * i as f64 + 0.3).sin()).collect();
    let w = ctx.g.constant(Tensor::new(shape, w)?);
    let m = ctx.g.mul(out, w)?;
    Ok(ctx.g.sum(m))
}

type OpFn = Box<dyn Fn(&mut Ctx, &[Var]) -> Result<Var>>;

/// One builder per differentiable op, with the input shapes it is fed.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![4]], Box::new(|c, v| c.g.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|c, v| c.g.sub(v[0], v[1]))),
        ("mul", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|c, v| c.g.mul(v[0], v[1]))),
        ("mul_scalar_bcast", vec![vec![3, 4], vec![1]], Box::new(|c, v| c.g.mul(v[0], v[1]))),
        (
            "div",
            vec![vec![3, 4], vec![4]],
            Box::new(|c, v| {
                let d = c.g.add_scalar(v[1], 3.0);
                c.g.div(v[0], d)
            }),
        ),
        ("scale", vec![vec![5]], Box::new(|c, v| Ok(c.g.scale(v[0], -1.7)))),
        ("add_scalar", vec![vec![5]], Box::new(|c, v| Ok(c.g.add_scalar(v[0], 0.4)))),
        (
            "log",
            vec![vec![6]],
            Box::new(|c, v| {
                let p = c.g.add_scalar(v[0], 2.0);
                Ok(c.g.log(p))
            }),
        ),
        ("exp", vec![vec![6]], Box::new(|c, v| Ok(c.g.exp(v[0])))),
        (
            "sqrt",
            vec![vec![6]],
            Box::new(|c, v| {
                let p = c.g.add_scalar(v[0], 2.0);
                Ok(c.g.sqrt(p))
            }),
        ),
        ("gelu", vec![vec![4, 4]], Box::new(|c, v| Ok(c.g.gelu(v[0])))),
        ("relu", vec![vec![4, 4]], Box::new(|c, v| Ok(c.g.relu(v[0])))),
        ("sigmoid", vec![vec![4, 4]], Box::new(|c, v| Ok(c.g.sigmoid(v[0])))),
        ("clamp", vec![vec![8]], Box::new(|c, v| Ok(c.g.clamp(v[0], -0.5, 0.5)))),
        ("clamp_min", vec![vec![8]], Box::new(|c, v| Ok(c.g.clamp_min(v[0], 0.1)))),
        ("mean", vec![vec![3, 5]], Box::new(|c, v| Ok(c.g.mean(v[0])))),
        ("sum", vec![vec![3, 5]], Box::new(|c, v| Ok(c.g.sum(v[0])))),
        ("mean_axis", vec![vec![2, 3, 4]], Box::new(|c, v| c.g.mean_axis(v[0], 1))),
        ("sum_axis", vec![vec![3, 4]], Box::new(|c, v| c.g.sum_axis(v[0], 0))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|c, v| c.g.matmul(v[0], v[1]))),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], Box::new(|c, v| c.g.bmm(v[0], v[1]))),
        ("transpose", vec![vec![2, 3, 4]], Box::new(|c, v| c.g.transpose(v[0]))),
        ("softmax_rows", vec![vec![3, 5]], Box::new(|c, v| c.g.softmax_rows(v[0]))),
        ("log_softmax_rows", vec![vec![3, 5]], Box::new(|c, v| c.g.log_softmax_rows(v[0]))),
        (
            "layer_norm",
            vec![vec![3, 8], vec![8], vec![8]],
            Box::new(|c, v| c.g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "concat_last_axis",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|c, v| c.g.concat_last_axis(&[v[0], v[1]])),
        ),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|c, v| c.g.concat(&[v[0], v[1]], 0))),
        ("split_heads", vec![vec![2, 3, 8]], Box::new(|c, v| c.g.split_heads(v[0], 4))),
        ("merge_heads", vec![vec![4, 3, 2]], Box::new(|c, v| c.g.merge_heads(v[0], 2))),
        ("index_select", vec![vec![4, 3]], Box::new(|c, v| c.g.index_select(v[0], &[2, 0, 2]))),
        ("reshape", vec![vec![2, 6]], Box::new(|c, v| c.g.reshape(v[0], &[3, 4]))),
        (
            "grl",
            vec![vec![5]],
            Box::new(|c, v| {
                let y = c.g.grl(v[0], 0.7)?;
                Ok(c.g.exp(y))
            }),
        ),
    ]
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]` so the
/// checks do not run at the tiny initial scale.
fn scramble<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        *store.value_mut(id) = random_tensor(rng, &shape, scale);
    }
}

fn merge(worst: &mut Option<GradCheck>, r: GradCheck) {
    match worst {
        Some(w) => {
            w.max_rel_err = w.max_rel_err.max(r.max_rel_err);
            w.coords_checked += r.coords_checked;
        }
        None => *worst = Some(r),
    }
}

fn checked_sum(ctx: &mut Ctx, terms: &[Option<Var>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            Some(a) => ctx.g.add(a, *t)?,
            None => *t,
        });
    }
    acc.ok_or_else(|| TensorError::Usage("no terms to check".into()))
}

const BLOCK_D: usize = 8;
const BLOCK_HEADS: usize = 2;
const BLOCK_N: usize = 3;

fn gradient_dtab_config(attention: DtabAttention) -> DtabConfig {
    DtabConfig {
        attention,
        dde_backprop: true,
        ..DtabConfig::default()
    }
}

fn tiny_encoder(dtab_positions: Vec<usize>) -> EncoderConfig {
    EncoderConfig {
        feat_dim: 6,
        d_model: BLOCK_D,
        heads: BLOCK_HEADS,
        layers: 2,
        mlp_ratio: 2,
        k_tokens: BLOCK_N,
        dtab_positions,
        positional_embedding: PositionalEmbedding::Learned,
        dtab: gradient_dtab_config(DtabAttention::Mdta),
    }
}

const MIXED: [Domain; 4] = [Domain::Source, Domain::Target, Domain::Target, Domain::Target];

fn filled_queue<R: Rng + ?Sized>(rng: &mut R, len: usize, d: usize) -> FeatureQueue {
    let mut q = FeatureQueue::new(8);
    for _ in 0..len {
        q.push(random_tensor(rng, &[d], 1.0).into_data());
    }
    q
}

/// One instance of a model-level check; inputs are stored as trainable parameters.
fn model_case<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let h = DEFAULT_STEP;
    let seed: u64 = rng.random();
    match name {
        "embed" => {
            let enc = Encoder::new(&mut store, rng, &tiny_encoder(vec![]))?;
            let x = store.add("input", Tensor::zeros(&[2, BLOCK_N, 6]), false);
            scramble(&mut store, rng, 0.5);
            check_store(name, &mut store, |c| {
                let xv = c.p(x);
                let t = enc.embed(c, xv)?;
                probe(c, t)
            }, h, None, rng)
        }
        "standard_block" => {
            let b = StandardBlock::new(&mut store, rng, "block", BLOCK_D, BLOCK_HEADS, 2 * BLOCK_D);
            let x = store.add("input", Tensor::zeros(&[2, BLOCK_N, BLOCK_D]), false);
            scramble(&mut store, rng, 0.5);
            check_store(name, &mut store, |c| {
                let xv = c.p(x);
                let (y, _) = b.forward(c, xv)?;
                probe(c, y)
            }, h, None, rng)
        }
        "encode" | "encode_with_dtab" => {
            let positions = if name == "encode" { vec![] } else { vec![1] };
            let enc = Encoder::new(&mut store, rng, &tiny_encoder(positions))?;
            let x = store.add("input", Tensor::zeros(&[4, BLOCK_N, 6]), false);
            scramble(&mut store, rng, 0.5);
            let queue = filled_queue(rng, 3, BLOCK_D);
            check_store(name, &mut store, |c| {
                let xv = c.p(x);
                let mut queues = vec![queue.clone()];
                let mut prng = ChaCha8Rng::seed_from_u64(seed);
                let (f, aux) = enc.encode(c, xv, Some(&MIXED), Pass::Train {
                    queues: &mut queues,
                    rng: &mut prng,
                })?;
                let p = probe(c, f)?;
                checked_sum(c, &[Some(p), aux.patch_loss, aux.ib_loss])
            }, h, Some(24), rng)
        }
        "dta_head" => {
            let dh = 4;
            let disc = PatchDiscriminator::new(&mut store, rng, "disc", dh);
            let ids: Vec<ParamId> = ["q", "k", "v"]
                .iter()
                .map(|n| store.add(*n, Tensor::zeros(&[4, BLOCK_N, dh]), false))
                .collect();
            scramble(&mut store, rng, 0.8);
            let labels = token_labels(&[Domain::Source, Domain::Target], 2, BLOCK_N);
            let cfg = gradient_dtab_config(DtabAttention::Mdta);
            check_store(name, &mut store, |c| {
                let (q, k, v) = (c.p(ids[0]), c.p(ids[1]), c.p(ids[2]));
                let o = dta_head(c, &disc, q, k, v, &labels, &cfg)?;
                let p = probe(c, o.out)?;
                let bq = c.g.mean(o.bce_q);
                let bk = c.g.mean(o.bce_k);
                checked_sum(c, &[Some(p), Some(bq), Some(bk)])
            }, h, None, rng)
        }
        "mdta" => {
            let m = Mdta::new(&mut store, rng, "attn", BLOCK_D, BLOCK_HEADS);
            let x = store.add("input", Tensor::zeros(&[2, BLOCK_N, BLOCK_D]), false);
            scramble(&mut store, rng, 0.5);
            let cfg = gradient_dtab_config(DtabAttention::Mdta);
            check_store(name, &mut store, |c| {
                let xv = c.p(x);
                let o = m.forward(c, xv, &[Domain::Source, Domain::Target], &cfg)?;
                let p = probe(c, o.out)?;
                checked_sum(c, &[Some(p), Some(o.patch_loss)])
            }, h, None, rng)
        }
        "self_attention" => {
            let a = SelfAttention::new(&mut store, rng, "attn", BLOCK_D, BLOCK_HEADS);
            let x = store.add("input", Tensor::zeros(&[2, BLOCK_N, BLOCK_D]), false);
            scramble(&mut store, rng, 0.5);
            check_store(name, &mut store, |c| {
                let xv = c.p(x);
                let o = a.forward(c, xv)?;
                probe(c, o.out)
            }, h, None, rng)
        }
        "ib_loss" => {
            let m = rng.random_range(2..=8);
            let d = rng.random_range(1..=4);
            let zs = store.add("zs", Tensor::zeros(&[m, d]), false);
            let zt = store.add("zt", Tensor::zeros(&[m, d]), false);
            scramble(&mut store, rng, 1.0);
            check_store(name, &mut store, |c| {
                let (a, b) = (c.p(zs), c.p(zt));
                ib_loss(&mut c.g, a, b, 5e-3)?.ok_or_else(|| TensorError::Usage("m < 2".into()))
            }, h, None, rng)
        }
        "dtab_block" | "dtab_block_self_attention" => {
            let attention = if name == "dtab_block" {
                DtabAttention::Mdta
            } else {
                DtabAttention::SelfAttention
            };
            let cfg = gradient_dtab_config(attention);
            let b = DtabBlock::new(&mut store, rng, "block", BLOCK_D, BLOCK_HEADS, 2 * BLOCK_D, &cfg);
            let x = store.add("input", Tensor::zeros(&[4, BLOCK_N, BLOCK_D]), false);
            scramble(&mut store, rng, 0.5);
            let queue = filled_queue(rng, 3, BLOCK_D);
            check_store(name, &mut store, |c| {
                let xv = c.p(x);
                let mut q = queue.clone();
                let mut prng = ChaCha8Rng::seed_from_u64(seed);
                let (y, aux) = b.forward(c, xv, &MIXED, Some(DtabTrain {
                    queue: &mut q,
                    rng: &mut prng,
                }))?;
                let p = probe(c, y)?;
                checked_sum(c, &[Some(p), aux.patch_loss, aux.ib_loss])
            }, h, None, rng)
        }
        "loss_cls" | "loss_soft_entropy" | "loss_adv" | "total_loss" => {
            let cls_cfg = ClassifierConfig::default();
            let head = ClassifierHead::new(&mut store, rng, BLOCK_D, 3, &cls_cfg)?;
            let adv = AdversarialHead::new(&mut store, rng, BLOCK_D);
            let f = store.add("features", Tensor::zeros(&[4, BLOCK_D]), false);
            scramble(&mut store, rng, 1.0);
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
            let doms = [Domain::Source, Domain::Source, Domain::Target, Domain::Target];
            let weights = LossWeights {
                entropy: rng.random_range(0.1..2.0),
                ib: rng.random_range(0.0..1.0),
                patch: 1.0,
            };
            check_store(name, &mut store, |c| {
                let fv = c.p(f);
                let logits = head.logits(c, fv)?;
                let src = c.g.index_select(logits, &[0, 1])?;
                let tgt = c.g.index_select(logits, &[2, 3])?;
                let parts = LossParts {
                    cls: Some(loss_cls(c, src, &labels)?),
                    entropy: Some(loss_soft_entropy(c, tgt)?),
                    adv: Some(loss_adv(c, &adv, fv, &doms, 0.5)?),
                    ib: None,
                    patch: None,
                };
                Ok(match name {
                    "loss_cls" => parts.cls.unwrap(),
                    "loss_soft_entropy" => parts.entropy.unwrap(),
                    "loss_adv" => parts.adv.unwrap(),
                    _ => total_loss(c, &parts, &weights)?.0,
                })
            }, h, None, rng)
        }
        other => Err(TensorError::Usage(format!("unknown gradient check {other:?}"))),
    }
}

/// Names of the model-level checks in each scope.
pub fn model_cases(scope: Scope) -> &'static [&'static str] {
    match scope {
        Scope::Ops => &[],
        Scope::Encoder => &["embed", "standard_block", "self_attention", "encode"],
        Scope::Dtab => &[
            "dta_head",
            "mdta",
            "ib_loss",
            "dtab_block",
            "dtab_block_self_attention",
            "encode_with_dtab",
        ],
        Scope::Heads => &["loss_cls", "loss_soft_entropy", "loss_adv", "total_loss"],
    }
}

/// Runs every check of `scope` on `instances` random draws; one result per
/// check holding the worst error seen.
pub fn run_scope(scope: Scope, instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    if scope == Scope::Ops {
        for (name, shapes, f) in op_cases() {
            let mut worst = None;
            for _ in 0..instances {
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect();
                let r = check_inputs(name, &inputs, |c, v| {
                    let o = f(c, v)?;
                    probe(c, o)
                }, &mut rng)?;
                merge(&mut worst, r);
            }
            results.extend(worst);
        }
    }
    for name in model_cases(scope) {
        let mut worst = None;
        for _ in 0..instances {
            merge(&mut worst, model_case(name, &mut rng)?);
        }
        results.extend(worst);
    }
    Ok(results)
}
