//! Clip embedding, transformer blocks and the GAP readout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Mlp, Projections, SelfAttention};
use crate::dtab::{DtabAux, DtabBlock, DtabConfig, DtabTrain, FeatureQueue};
use crate::features::Domain;
use crate::graph::Var;
use crate::nn::{trunc_normal, Ctx, LayerNorm, Linear, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEmbedding {
    Learned,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Frames sampled per video (token count).
    pub k_tokens: usize,
    /// Block indices (0-based) that are DTABs.
    pub dtab_positions: Vec<usize>,
    pub positional_embedding: PositionalEmbedding,
    pub dtab: DtabConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feat_dim: 2048,
            d_model: 512,
            heads: 8,
            layers: 4,
            mlp_ratio: 4,
            k_tokens: 16,
            dtab_positions: vec![3],
            positional_embedding: PositionalEmbedding::Learned,
            dtab: DtabConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("mlp_ratio", self.mlp_ratio),
            ("k_tokens", self.k_tokens),
        ] {
            if v == 0 {
                return Err(format!("model.encoder.{name} must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(format!(
                "model.encoder.d_model {} is not divisible by model.encoder.heads {}",
                self.d_model, self.heads
            ));
        }
        if let Some(p) = self.dtab_positions.iter().find(|&&p| p >= self.layers) {
            return Err(format!(
                "model.encoder.dtab_positions contains {p}, outside 0..{}",
                self.layers
            ));
        }
        self.dtab.validate()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn is_dtab(&self, block: usize) -> bool {
        self.dtab_positions.contains(&block)
    }

    /// Number of DTAB blocks (and so of feature queues).
    pub fn dtab_count(&self) -> usize {
        (0..self.layers).filter(|&b| self.is_dtab(b)).count()
    }

    /// Closed-form parameter count of the encoder, derived from the config alone.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let embed = Linear::param_count(self.feat_dim, d, true) + Linear::param_count(d, d, true);
        let pos = match self.positional_embedding {
            PositionalEmbedding::Learned => self.k_tokens * d,
            PositionalEmbedding::None => 0,
        };
        let blocks: usize = (0..self.layers)
            .map(|b| {
                if self.is_dtab(b) {
                    DtabBlock::param_count(d, self.heads, self.mlp_hidden(), &self.dtab)
                } else {
                    StandardBlock::param_count(d, self.mlp_hidden())
                }
            })
            .sum();
        embed + pos + blocks
    }
}

/// Pre-norm block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct StandardBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl StandardBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Self {
        StandardBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, mlp_hidden),
        }
    }

    pub fn param_count(d: usize, mlp_hidden: usize) -> usize {
        4 * d + Projections::param_count(d) + Mlp::param_count(d, mlp_hidden)
    }

    /// Returns the new tokens and the attention weights `[B·h, n, n]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let h = self.ln1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h)?;
        let x = ctx.g.add(x, a.out)?;
        let h = self.ln2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        Ok((ctx.g.add(x, m)?, a.weights))
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Standard(StandardBlock),
    Dtab(DtabBlock),
}

/// Clip embedding MLP (`feat_dim → d → d`, GELU) plus optional positions.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub pos: Option<ParamId>,
}

impl Embedding {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.gelu(h);
        let mut y = self.fc2.forward(ctx, h)?;
        if let Some(p) = self.pos {
            let p = ctx.p(p);
            y = ctx.g.add(y, p)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: Embedding,
    pub blocks: Vec<Block>,
}

/// How a forward pass treats the DTABs.
pub enum Pass<'a> {
    Eval,
    Train {
        queues: &'a mut [FeatureQueue],
        rng: &'a mut dyn rand::RngCore,
    },
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train { .. })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EncodeAux {
    /// Sum over DTABs of their patch-discriminator losses.
    pub patch_loss: Option<Var>,
    /// Sum over DTABs of their bottleneck losses.
    pub ib_loss: Option<Var>,
    pub ib_pairs: usize,
    pub per_dtab: Vec<DtabAux>,
}

fn sum_opt(ctx: &mut Ctx, acc: Option<Var>, v: Option<Var>) -> Result<Option<Var>> {
    Ok(match (acc, v) {
        (Some(a), Some(b)) => Some(ctx.g.add(a, b)?),
        (a, b) => a.or(b),
    })
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate().map_err(TensorError::Config)?;
        let d = cfg.d_model;
        let embed = Embedding {
            fc1: Linear::new(store, rng, "embed.fc1", cfg.feat_dim, d, true, false),
            fc2: Linear::new(store, rng, "embed.fc2", d, d, true, false),
            pos: match cfg.positional_embedding {
                PositionalEmbedding::Learned => Some(store.add(
                    "embed.pos",
                    trunc_normal(rng, &[cfg.k_tokens, d], INIT_STD),
                    false,
                )),
                PositionalEmbedding::None => None,
            },
        };
        let blocks = (0..cfg.layers)
            .map(|b| {
                let name = format!("blocks.{b}");
                if cfg.is_dtab(b) {
                    Block::Dtab(DtabBlock::new(
                        store,
                        rng,
                        &name,
                        d,
                        cfg.heads,
                        cfg.mlp_hidden(),
                        &cfg.dtab,
                    ))
                } else {
                    Block::Standard(StandardBlock::new(store, rng, &name, d, cfg.heads, cfg.mlp_hidden()))
                }
            })
            .collect();
        Ok(Encoder {
            cfg: cfg.clone(),
            embed,
            blocks,
        })
    }

    pub fn new_queues(&self) -> Vec<FeatureQueue> {
        (0..self.cfg.dtab_count())
            .map(|_| FeatureQueue::new(self.cfg.dtab.queue_capacity))
            .collect()
    }

    fn check_input(&self, ctx: &Ctx, x: Var) -> Result<()> {
        let s = ctx.g.shape(x);
        if s.len() != 3 || s[1] != self.cfg.k_tokens || s[2] != self.cfg.feat_dim {
            return Err(TensorError::Config(format!(
                "expected input [B, {}, {}], got {:?}",
                self.cfg.k_tokens, self.cfg.feat_dim, s
            )));
        }
        Ok(())
    }

    /// `[B, k, feat_dim]` to tokens `[B, k, d_model]`.
    pub fn embed(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(ctx, x)?;
        self.embed.forward(ctx, x)
    }

    /// Embeds, runs every block and mean-pools over tokens: `f` is `[B, d_model]`.
    ///
    /// DTABs need per-video domains; in evaluation they default to target.
    pub fn encode(
        &self,
        ctx: &mut Ctx,
        x: Var,
        domains: Option<&[Domain]>,
        pass: Pass<'_>,
    ) -> Result<(Var, EncodeAux)> {
        let tokens = self.embed(ctx, x)?;
        let (f, _, aux) = self.run_blocks(ctx, tokens, domains, pass)?;
        Ok((f, aux))
    }

    /// Runs blocks on already-embedded tokens; returns pooled features, the final tokens and aux.
    pub fn run_blocks(
        &self,
        ctx: &mut Ctx,
        tokens: Var,
        domains: Option<&[Domain]>,
        mut pass: Pass<'_>,
    ) -> Result<(Var, Var, EncodeAux)> {
        let b = ctx.g.shape(tokens)[0];
        let default_domains;
        let domains = match domains {
            Some(d) => d,
            None if pass.is_train() && self.cfg.dtab_count() > 0 => {
                return Err(TensorError::Usage(
                    "DTAB blocks need domain labels during training".into(),
                ))
            }
            None => {
                default_domains = vec![Domain::Target; b];
                &default_domains
            }
        };
        if let Pass::Train { queues, .. } = &pass {
            if queues.len() < self.cfg.dtab_count() {
                return Err(TensorError::Usage(format!(
                    "{} feature queues for {} DTAB blocks",
                    queues.len(),
                    self.cfg.dtab_count()
                )));
            }
        }
        let mut aux = EncodeAux::default();
        let mut x = tokens;
        let mut dtab_idx = 0;
        for block in &self.blocks {
            match block {
                Block::Standard(s) => x = s.forward(ctx, x)?.0,
                Block::Dtab(dblock) => {
                    let train = match &mut pass {
                        Pass::Eval => None,
                        Pass::Train { queues, rng } => Some(DtabTrain {
                            queue: &mut queues[dtab_idx],
                            rng: &mut **rng,
                        }),
                    };
                    let (y, a) = dblock.forward(ctx, x, domains, train)?;
                    x = y;
                    aux.patch_loss = sum_opt(ctx, aux.patch_loss, a.patch_loss)?;
                    aux.ib_loss = sum_opt(ctx, aux.ib_loss, a.ib_loss)?;
                    aux.ib_pairs += a.ib_pairs;
                    aux.per_dtab.push(a);
                    dtab_idx += 1;
                }
            }
        }
        let f = ctx.g.mean_axis(x, 1)?;
        Ok((f, x, aux))
    }
}
