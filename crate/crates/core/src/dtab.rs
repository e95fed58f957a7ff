//! Domain transferable-guided attention block.
//!
//! A patch-level discriminator, shared by all heads and by the query and key
//! roles, scores every projected token through a gradient reversal layer. Its
//! binary cross-entropy (the domain discriminator error, DDE) measures how
//! well the token hides its domain. Attention logits are the outer product of
//! the query-side and key-side DDE vectors scaled by `1/√d_h`, so tokens that
//! confuse the discriminator receive more weight. After the block's last
//! residual connection, pooled source and target features are paired and
//! pushed through a cross-correlation (information bottleneck) loss, with a
//! FIFO of recent source features supplying extra partners.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{Mlp, Projections, SelfAttention};
use crate::features::Domain;
use crate::graph::{Graph, Var};
use crate::nn::{Ctx, LayerNorm, Linear, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Discriminator probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-7;
/// Pre-activation clamp ahead of the discriminator sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;
/// Floor on the per-dimension sum of squares in the cross-correlation.
pub const IB_VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdeConvention {
    /// `-log p` for source tokens, `-log(1-p)` for target tokens.
    Bce,
    /// `log p` / `log(1-p)`: the negation of `Bce`, kept for comparison.
    RawLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtabAttention {
    /// Transferability attention driven by the patch discriminator.
    Mdta,
    /// Plain self-attention (used to ablate the attention change).
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DtabConfig {
    pub attention: DtabAttention,
    pub information_bottleneck: bool,
    /// GRL weight between the projections and the patch discriminator.
    pub grl_lambda: f64,
    pub queue_capacity: usize,
    /// Weight of the off-diagonal cross-correlation terms.
    pub ib_offdiag_weight: f64,
    pub dde_convention: DdeConvention,
    /// Let task gradients flow through the DDE values inside the attention logits.
    pub dde_backprop: bool,
}

impl Default for DtabConfig {
    fn default() -> Self {
        DtabConfig {
            attention: DtabAttention::Mdta,
            information_bottleneck: true,
            grl_lambda: 1.0,
            queue_capacity: 1024,
            ib_offdiag_weight: 5e-3,
            dde_convention: DdeConvention::Bce,
            dde_backprop: false,
        }
    }
}

impl DtabConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.grl_lambda >= 0.0) {
            return Err(format!("model.encoder.dtab.grl_lambda must be >= 0, got {}", self.grl_lambda));
        }
        if !(self.ib_offdiag_weight >= 0.0) {
            return Err(format!(
                "model.encoder.dtab.ib_offdiag_weight must be >= 0, got {}",
                self.ib_offdiag_weight
            ));
        }
        Ok(())
    }
}

/// Domain discriminator error of one probability (`p` = P(source)).
pub fn dde(p: f64, domain: Domain, convention: DdeConvention) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let bce = match domain {
        Domain::Source => -p.ln(),
        Domain::Target => -(1.0 - p).ln(),
    };
    match convention {
        DdeConvention::Bce => bce,
        DdeConvention::RawLog => -bce,
    }
}

/// Per-element binary cross-entropy of probabilities `p` against constant
/// `labels` (1 = source), with `p` clamped away from 0 and 1.
pub fn bce_terms(g: &mut Graph, p: Var, labels: &Tensor) -> Result<Var> {
    let pc = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
    let logp = g.log(pc);
    let neg = g.neg(pc);
    let one_minus = g.add_scalar(neg, 1.0);
    let log1mp = g.log(one_minus);
    let y = g.constant(labels.reshape(g.shape(p))?);
    let one_minus_y_t = Tensor::new(
        labels.shape().to_vec(),
        labels.data().iter().map(|v| 1.0 - v).collect(),
    )?;
    let ny = g.constant(one_minus_y_t.reshape(g.shape(p))?);
    let a = g.mul(logp, y)?;
    let b = g.mul(log1mp, ny)?;
    let s = g.add(a, b)?;
    Ok(g.neg(s))
}

/// Two-layer token discriminator `d_h → d_h → 1` with a sigmoid output.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PatchDiscriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dh: usize) -> Self {
        PatchDiscriminator {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dh, dh, true, false),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dh, 1, true, false),
        }
    }

    pub fn param_count(dh: usize) -> usize {
        Linear::param_count(dh, dh, true) + Linear::param_count(dh, 1, true)
    }

    /// `x: [N, d_h]` to source probabilities `[N]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.relu(h);
        let z = self.fc2.forward(ctx, h)?;
        let z = ctx.g.clamp(z, -LOGIT_CLAMP, LOGIT_CLAMP);
        let p = ctx.g.sigmoid(z);
        let n = ctx.g.shape(p)[0];
        ctx.g.reshape(p, &[n])
    }
}

/// Everything one transferability-attention pass produces.
pub struct DtaOutput {
    /// `[G, n, d_h]`
    pub out: Var,
    /// `[G, n, n]` softmax weights.
    pub weights: Var,
    /// `[G, n, n]` pre-softmax logits.
    pub logits: Var,
    /// Per-token BCE of the query-side and key-side predictions, `[G·n]`.
    pub bce_q: Var,
    pub bce_k: Var,
    /// DDE values used in the logits, `[G·n]`.
    pub e_q: Tensor,
    pub e_k: Tensor,
}

/// Transferability attention over `G` independent groups (video × head).
///
/// `qp`, `kp`, `vp` are `[G, n, d_h]`; `token_labels` holds the domain label
/// (1 = source, 0 = target) of each of the `G·n` tokens.
pub fn dta_head(
    ctx: &mut Ctx,
    disc: &PatchDiscriminator,
    qp: Var,
    kp: Var,
    vp: Var,
    token_labels: &Tensor,
    cfg: &DtabConfig,
) -> Result<DtaOutput> {
    let s = ctx.g.shape(qp).to_vec();
    if s.len() != 3 || ctx.g.shape(kp) != s.as_slice() || ctx.g.shape(vp) != s.as_slice() {
        return Err(TensorError::Shape {
            op: "dta_head",
            lhs: s,
            rhs: ctx.g.shape(kp).to_vec(),
        });
    }
    let (groups, n, dh) = (s[0], s[1], s[2]);
    if token_labels.numel() != groups * n {
        return Err(TensorError::Shape {
            op: "dta_head labels",
            lhs: vec![groups, n],
            rhs: token_labels.shape().to_vec(),
        });
    }

    let mut role = |x: Var| -> Result<(Var, Var)> {
        let flat = ctx.g.reshape(x, &[groups * n, dh])?;
        let rev = ctx.g.grl(flat, cfg.grl_lambda)?;
        let p = disc.forward(ctx, rev)?;
        let bce = bce_terms(&mut ctx.g, p, token_labels)?;
        let e = match cfg.dde_convention {
            DdeConvention::Bce => bce,
            DdeConvention::RawLog => ctx.g.neg(bce),
        };
        let e = if cfg.dde_backprop { e } else { ctx.g.detach(e) };
        Ok((bce, e))
    };
    let (bce_q, e_q) = role(qp)?;
    let (bce_k, e_k) = role(kp)?;

    let eq_col = ctx.g.reshape(e_q, &[groups, n, 1])?;
    let ek_row = ctx.g.reshape(e_k, &[groups, 1, n])?;
    let outer = ctx.g.bmm(eq_col, ek_row)?;
    let logits = ctx.g.scale(outer, 1.0 / (dh as f64).sqrt());
    let weights = ctx.g.softmax_rows(logits)?;
    let out = ctx.g.bmm(weights, vp)?;
    Ok(DtaOutput {
        out,
        weights,
        logits,
        bce_q,
        bce_k,
        e_q: ctx.g.value(e_q).clone(),
        e_k: ctx.g.value(e_k).clone(),
    })
}

/// Token domain labels for `[B·h, n]` groups, video-major.
pub fn token_labels(domains: &[Domain], heads: usize, n: usize) -> Tensor {
    let data = domains
        .iter()
        .flat_map(|d| std::iter::repeat_n(d.label(), heads * n))
        .collect();
    Tensor::new(vec![domains.len() * heads, n], data).expect("non-empty domains")
}

/// Multi-head transferability attention.
#[derive(Debug, Clone)]
pub struct Mdta {
    pub proj: Projections,
    pub disc: PatchDiscriminator,
    pub heads: usize,
}

pub struct MdtaOutput {
    pub out: Var,
    /// Mean BCE over every head, token and both the query and key roles.
    pub patch_loss: Var,
    pub weights: Var,
    pub logits: Var,
    /// Key-side DDE averaged over heads, `[B, n]`.
    pub transferability: Tensor,
}

impl Mdta {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        Mdta {
            proj: Projections::new(store, rng, name, d),
            disc: PatchDiscriminator::new(store, rng, &format!("{name}.disc"), d / heads),
            heads,
        }
    }

    pub fn param_count(d: usize, heads: usize) -> usize {
        Projections::param_count(d) + PatchDiscriminator::param_count(d / heads)
    }

    /// `x: [B, n, d]` with one domain per video.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        domains: &[Domain],
        cfg: &DtabConfig,
    ) -> Result<MdtaOutput> {
        let s = ctx.g.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        if domains.len() != b {
            return Err(TensorError::Usage(format!(
                "{} domain labels for a batch of {b}",
                domains.len()
            )));
        }
        let (q, k, v) = self.proj.split_qkv(ctx, x, self.heads)?;
        let labels = token_labels(domains, self.heads, n);
        let dta = dta_head(ctx, &self.disc, q, k, v, &labels, cfg)?;
        let out = self.proj.merge_out(ctx, dta.out, self.heads)?;
        let mq = ctx.g.mean(dta.bce_q);
        let mk = ctx.g.mean(dta.bce_k);
        let both = ctx.g.add(mq, mk)?;
        let patch_loss = ctx.g.scale(both, 0.5);

        let mut transferability = vec![0.0; b * n];
        for bi in 0..b {
            for hi in 0..self.heads {
                for t in 0..n {
                    transferability[bi * n + t] +=
                        dta.e_k.data()[(bi * self.heads + hi) * n + t] / self.heads as f64;
                }
            }
        }
        Ok(MdtaOutput {
            out,
            patch_loss,
            weights: dta.weights,
            logits: dta.logits,
            transferability: Tensor::new(vec![b, n], transferability)?,
        })
    }
}

/// Cross-correlation alignment loss between paired rows of `zs` and `zt`
/// (`[m, d]` each): per-dimension centring over the `m` pairs, then
/// `C_ij = Σ_b zs_ib·zt_jb / (‖zs_i‖‖zt_j‖)` and
/// `L = Σ_i (1 - C_ii)² + w·Σ_{i≠j} C_ij²`.
///
/// Returns `None` when fewer than two pairs exist.
pub fn ib_loss(g: &mut Graph, zs: Var, zt: Var, offdiag_weight: f64) -> Result<Option<Var>> {
    let s = g.shape(zs).to_vec();
    if s.len() != 2 || g.shape(zt) != s.as_slice() {
        return Err(TensorError::Shape {
            op: "ib_loss",
            lhs: s,
            rhs: g.shape(zt).to_vec(),
        });
    }
    let (m, d) = (s[0], s[1]);
    if m < 2 {
        log::warn!("information bottleneck skipped: {m} pair(s)");
        return Ok(None);
    }
    let mut normalise = |z: Var| -> Result<Var> {
        let mu = g.mean_axis(z, 0)?;
        let c = g.sub(z, mu)?;
        let sq = g.mul(c, c)?;
        let ss = g.sum_axis(sq, 0)?;
        let ss = g.clamp_min(ss, IB_VAR_FLOOR);
        let norm = g.sqrt(ss);
        g.div(c, norm)
    };
    let a = normalise(zs)?;
    let b = normalise(zt)?;
    let at = g.transpose(a)?;
    let corr = g.matmul(at, b)?;
    let mut eye = Tensor::zeros(&[d, d]);
    let mut weight = Tensor::full(&[d, d], offdiag_weight);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
        weight.data_mut()[i * d + i] = 1.0;
    }
    let eye = g.constant(eye);
    let weight = g.constant(weight);
    let diff = g.sub(corr, eye)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, weight)?;
    Ok(Some(g.sum(weighted)))
}

/// Bounded FIFO of detached source features.
#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    items: VecDeque<Vec<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        FeatureQueue {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest entry when full.
    pub fn push(&mut self, feature: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(feature);
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.items.iter()
    }

    /// Copy of the current contents, oldest first.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.items.iter().cloned().collect()
    }
}

/// Training-time state a DTAB needs: its queue and a random source for pairing.
pub struct DtabTrain<'a> {
    pub queue: &'a mut FeatureQueue,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Debug, Clone, Default)]
pub struct DtabAux {
    pub patch_loss: Option<Var>,
    pub ib_loss: Option<Var>,
    pub ib_pairs: usize,
    /// Key-side DDE per token averaged over heads, `[B, n]`, when MDTA ran.
    pub transferability: Option<Tensor>,
}

/// Which rows of the pooled features are paired for the bottleneck loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    /// Batch rows used as source partners, in pair order.
    pub source_rows: Vec<usize>,
    /// Queue entries used as source partners after the batch rows.
    pub queue_entries: Vec<usize>,
    /// Batch rows of the target partners, in pair order.
    pub target_rows: Vec<usize>,
}

impl Pairing {
    pub fn len(&self) -> usize {
        self.target_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_rows.is_empty()
    }
}

/// Shuffles both domains' rows and pairs them index by index; targets left
/// over are matched with uniformly drawn queue entries.
pub fn pair_rows<R: Rng + ?Sized>(domains: &[Domain], queue_len: usize, rng: &mut R) -> Pairing {
    let mut src: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == Domain::Source).collect();
    let mut tgt: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == Domain::Target).collect();
    src.shuffle(rng);
    tgt.shuffle(rng);
    let m0 = src.len().min(tgt.len());
    src.truncate(m0);
    let mut queue_entries = Vec::new();
    if queue_len > 0 {
        for _ in m0..tgt.len() {
            queue_entries.push(rng.random_range(0..queue_len));
        }
    } else {
        tgt.truncate(m0);
    }
    Pairing {
        source_rows: src,
        queue_entries,
        target_rows: tgt,
    }
}

/// Pre-norm transformer block with the attention swapped for MDTA (or kept
/// as self-attention for ablation) and the bottleneck loss after the final
/// residual connection.
#[derive(Debug, Clone)]
pub struct DtabBlock {
    pub ln1: LayerNorm,
    pub attn: DtabAttnLayer,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub cfg: DtabConfig,
}

#[derive(Debug, Clone)]
pub enum DtabAttnLayer {
    Mdta(Mdta),
    SelfAttention(SelfAttention),
}

impl DtabBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        mlp_hidden: usize,
        cfg: &DtabConfig,
    ) -> Self {
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let attn = match cfg.attention {
            DtabAttention::Mdta => {
                DtabAttnLayer::Mdta(Mdta::new(store, rng, &format!("{name}.attn"), d, heads))
            }
            DtabAttention::SelfAttention => DtabAttnLayer::SelfAttention(SelfAttention::new(
                store,
                rng,
                &format!("{name}.attn"),
                d,
                heads,
            )),
        };
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
        let mlp = Mlp::new(store, rng, &format!("{name}.mlp"), d, mlp_hidden);
        DtabBlock {
            ln1,
            attn,
            ln2,
            mlp,
            cfg: cfg.clone(),
        }
    }

    pub fn param_count(d: usize, heads: usize, mlp_hidden: usize, cfg: &DtabConfig) -> usize {
        let attn = match cfg.attention {
            DtabAttention::Mdta => Mdta::param_count(d, heads),
            DtabAttention::SelfAttention => Projections::param_count(d),
        };
        4 * d + attn + Mlp::param_count(d, mlp_hidden)
    }

    /// `x: [B, n, d]`. With `train` absent (evaluation) no losses are built
    /// and the queue is left alone.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        domains: &[Domain],
        train: Option<DtabTrain<'_>>,
    ) -> Result<(Var, DtabAux)> {
        let mut aux = DtabAux::default();
        let h = self.ln1.forward(ctx, x)?;
        let attn_out = match &self.attn {
            DtabAttnLayer::Mdta(m) => {
                let o = m.forward(ctx, h, domains, &self.cfg)?;
                if train.is_some() {
                    aux.patch_loss = Some(o.patch_loss);
                }
                aux.transferability = Some(o.transferability);
                o.out
            }
            DtabAttnLayer::SelfAttention(a) => a.forward(ctx, h)?.out,
        };
        let x = ctx.g.add(x, attn_out)?;
        let h = self.ln2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        let out = ctx.g.add(x, m)?;

        if let (Some(t), true) = (train, self.cfg.information_bottleneck) {
            let pooled = ctx.g.mean_axis(out, 1)?;
            let pairing = pair_rows(domains, t.queue.len(), t.rng);
            aux.ib_pairs = pairing.len();
            if pairing.len() >= 2 {
                let d = ctx.g.shape(pooled)[1];
                let mut parts = Vec::new();
                if !pairing.source_rows.is_empty() {
                    parts.push(ctx.g.index_select(pooled, &pairing.source_rows)?);
                }
                if !pairing.queue_entries.is_empty() {
                    let rows: Vec<f64> = pairing
                        .queue_entries
                        .iter()
                        .flat_map(|&i| t.queue.get(i).iter().copied())
                        .collect();
                    let q = Tensor::new(vec![pairing.queue_entries.len(), d], rows)?;
                    parts.push(ctx.g.constant(q));
                }
                let zs = if parts.len() == 1 {
                    parts[0]
                } else {
                    ctx.g.concat(&parts, 0)?
                };
                let zt = ctx.g.index_select(pooled, &pairing.target_rows)?;
                aux.ib_loss = ib_loss(&mut ctx.g, zs, zt, self.cfg.ib_offdiag_weight)?;
            } else {
                log::warn!("information bottleneck skipped: {} pair(s)", pairing.len());
            }
            let pooled_value = ctx.g.value(pooled).clone();
            for (i, dom) in domains.iter().enumerate() {
                if *dom == Domain::Source {
                    t.queue.push(pooled_value.row(i).to_vec());
                }
            }
        }
        Ok((out, aux))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dde_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!(dde(1.0 - 1e-12, Domain::Source, DdeConvention::Bce) < 1e-6);
        assert!((dde(0.5, Domain::Source, DdeConvention::Bce) - ln2).abs() < 1e-12);
        assert!((dde(0.5, Domain::Target, DdeConvention::Bce) - ln2).abs() < 1e-12);
        for p in [0.1, 0.5, 0.9] {
            for d in [Domain::Source, Domain::Target] {
                assert!(dde(p, d, DdeConvention::Bce) >= 0.0);
                assert_eq!(dde(p, d, DdeConvention::RawLog), -dde(p, d, DdeConvention::Bce));
            }
        }
    }

    #[test]
    fn queue_is_fifo_and_bounded() {
        let mut q = FeatureQueue::new(3);
        for i in 0..3 {
            q.push(vec![i as f64]);
        }
        assert_eq!(q.len(), 3);
        q.push(vec![3.0]);
        assert_eq!(q.len(), 3);
        assert_eq!(q.snapshot(), vec![vec![1.0], vec![2.0], vec![3.0]]);
    }

    #[test]
    fn pairing_counts() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let doms = [Domain::Source, Domain::Target, Domain::Source, Domain::Target];
        let p = pair_rows(&doms, 0, &mut rng);
        assert_eq!(p.len(), 2);
        assert!(p.queue_entries.is_empty());

        let doms = [Domain::Source, Domain::Target, Domain::Target, Domain::Target];
        let p = pair_rows(&doms, 5, &mut rng);
        assert_eq!((p.source_rows.len(), p.queue_entries.len(), p.len()), (1, 2, 3));
        assert!(p.queue_entries.iter().all(|&i| i < 5));

        let p = pair_rows(&doms, 0, &mut rng);
        assert_eq!(p.len(), 1);
    }
}
