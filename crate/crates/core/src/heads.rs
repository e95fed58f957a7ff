//! Classification and adversarial heads and the training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dtab::bce_terms;
use crate::features::Domain;
use crate::graph::Var;
use crate::nn::{Ctx, Linear, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// 1 = linear probe, 2 = two-layer MLP.
    pub depth: usize,
    pub trainable: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            depth: 1,
            trainable: false,
        }
    }
}

/// `G_C`: a (by default frozen) map from pooled features to class logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub layers: Vec<Linear>,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d: usize,
        n_classes: usize,
        cfg: &ClassifierConfig,
    ) -> Result<Self> {
        let frozen = !cfg.trainable;
        let layers = match cfg.depth {
            1 => vec![Linear::new(store, rng, "classifier", d, n_classes, false, frozen)],
            2 => vec![
                Linear::new(store, rng, "classifier.fc1", d, d, true, frozen),
                Linear::new(store, rng, "classifier.fc2", d, n_classes, true, frozen),
            ],
            other => {
                return Err(TensorError::Config(format!(
                    "classifier.depth must be 1 or 2, got {other}"
                )))
            }
        };
        Ok(ClassifierHead { layers })
    }

    pub fn param_count(d: usize, n_classes: usize, cfg: &ClassifierConfig) -> usize {
        match cfg.depth {
            1 => Linear::param_count(d, n_classes, false),
            _ => Linear::param_count(d, d, true) + Linear::param_count(d, n_classes, true),
        }
    }

    pub fn logits(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let mut h = f;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = ctx.g.gelu(h);
            }
            h = l.forward(ctx, h)?;
        }
        Ok(h)
    }
}

/// `G_D`: `d → d/2 → 1` with sigmoid, behind a gradient reversal layer.
#[derive(Debug, Clone)]
pub struct AdversarialHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AdversarialHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, d: usize) -> Self {
        let hidden = (d / 2).max(1);
        AdversarialHead {
            fc1: Linear::new(store, rng, "adversary.fc1", d, hidden, true, false),
            fc2: Linear::new(store, rng, "adversary.fc2", hidden, 1, true, false),
        }
    }

    pub fn param_count(d: usize) -> usize {
        let hidden = (d / 2).max(1);
        Linear::param_count(d, hidden, true) + Linear::param_count(hidden, 1, true)
    }

    /// Source probability for each pooled feature, `[B]`.
    pub fn forward(&self, ctx: &mut Ctx, f: Var, lambda: f64) -> Result<Var> {
        let r = ctx.g.grl(f, lambda)?;
        let h = self.fc1.forward(ctx, r)?;
        let h = ctx.g.relu(h);
        let z = self.fc2.forward(ctx, h)?;
        let z = ctx.g.clamp(z, -crate::dtab::LOGIT_CLAMP, crate::dtab::LOGIT_CLAMP);
        let p = ctx.g.sigmoid(z);
        let n = ctx.g.shape(p)[0];
        ctx.g.reshape(p, &[n])
    }
}

fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), n_classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(TensorError::Config(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        t.data_mut()[i * n_classes + l] = 1.0;
    }
    Ok(t)
}

/// Mean cross-entropy `-log softmax(logits)[label]`.
pub fn loss_cls(ctx: &mut Ctx, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = ctx.g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(TensorError::Shape {
            op: "loss_cls",
            lhs: s,
            rhs: vec![labels.len()],
        });
    }
    let y = ctx.g.constant(one_hot(labels, s[1])?);
    let lsm = ctx.g.log_softmax_rows(logits)?;
    let picked = ctx.g.mul(lsm, y)?;
    let total = ctx.g.sum(picked);
    Ok(ctx.g.scale(total, -1.0 / labels.len() as f64))
}

/// Mean entropy `-Σ_c p_c log p_c` of `softmax(logits)`, log clamped at 1e-12.
pub fn loss_soft_entropy(ctx: &mut Ctx, logits: Var) -> Result<Var> {
    let b = ctx.g.shape(logits)[0];
    let p = ctx.g.softmax_rows(logits)?;
    let logp = ctx.g.log(p);
    let plogp = ctx.g.mul(p, logp)?;
    let total = ctx.g.sum(plogp);
    Ok(ctx.g.scale(total, -1.0 / b as f64))
}

/// Mean BCE of the adversarial head's predictions against domain labels.
pub fn loss_adv(
    ctx: &mut Ctx,
    head: &AdversarialHead,
    f: Var,
    domains: &[Domain],
    lambda: f64,
) -> Result<Var> {
    if !domains.contains(&Domain::Source) || !domains.contains(&Domain::Target) {
        log::warn!("adversarial loss on a single-domain batch");
    }
    let p = head.forward(ctx, f, lambda)?;
    let labels = Tensor::vector(domains.iter().map(|d| d.label()).collect());
    let terms = bce_terms(&mut ctx.g, p, &labels)?;
    Ok(ctx.g.mean(terms))
}

/// Which loss terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossMask {
    pub cls: bool,
    pub entropy: bool,
    pub adv: bool,
    pub ib: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        LossMask {
            cls: true,
            entropy: true,
            adv: true,
            ib: true,
        }
    }
}

impl LossMask {
    pub fn cls_only() -> Self {
        LossMask {
            cls: true,
            entropy: false,
            adv: false,
            ib: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub entropy: f64,
    /// IB weight (`alpha`).
    pub ib: f64,
    pub patch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            entropy: 1.0,
            ib: 0.001,
            patch: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("entropy", self.entropy), ("ib", self.ib), ("patch", self.patch)] {
            if !(v >= 0.0) {
                return Err(format!("train.weights.{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Loss terms of one step; absent terms contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub cls: Option<Var>,
    pub entropy: Option<Var>,
    pub adv: Option<Var>,
    pub ib: Option<Var>,
    pub patch: Option<Var>,
}

/// Per-step decomposition of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub entropy: f64,
    pub adv: f64,
    pub ib: f64,
    pub patch: f64,
    pub total: f64,
    pub w_entropy: f64,
    pub w_ib: f64,
    pub w_patch: f64,
}

impl LossReport {
    /// `cls + w_H·H + adv + α·ib + w_pd·patch`, recomputed from the fields.
    pub fn weighted_sum(&self) -> f64 {
        self.cls + self.w_entropy * self.entropy + self.adv + self.w_ib * self.ib + self.w_patch * self.patch
    }
}

/// `L = L_cls + w_H·L_H + L_adv + α·L_ib + w_pd·L_patch`. The adversarial
/// strength lives in the GRL weights, not here.
pub fn total_loss(ctx: &mut Ctx, parts: &LossParts, w: &LossWeights) -> Result<(Var, LossReport)> {
    w.validate().map_err(TensorError::Config)?;
    let mut report = LossReport {
        w_entropy: w.entropy,
        w_ib: w.ib,
        w_patch: w.patch,
        ..Default::default()
    };
    let mut terms = Vec::new();
    let mut take = |ctx: &mut Ctx, v: Option<Var>, weight: f64, slot: &mut f64| {
        if let Some(v) = v {
            *slot = ctx.g.value(v).item();
            terms.push(if weight == 1.0 { v } else { ctx.g.scale(v, weight) });
        }
    };
    take(ctx, parts.cls, 1.0, &mut report.cls);
    take(ctx, parts.entropy, w.entropy, &mut report.entropy);
    take(ctx, parts.adv, 1.0, &mut report.adv);
    take(ctx, parts.ib, w.ib, &mut report.ib);
    take(ctx, parts.patch, w.patch, &mut report.patch);
    let total = match terms.split_first() {
        None => ctx.g.constant(Tensor::scalar(0.0)),
        Some((first, rest)) => {
            let mut acc = *first;
            for &t in rest {
                acc = ctx.g.add(acc, t)?;
            }
            acc
        }
    };
    report.total = ctx.g.value(total).item();
    Ok((total, report))
}
