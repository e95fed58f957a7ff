//! Training loop, evaluation, task presets and ablation protocols.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::batch::{make_batch, Batch, Dataset};
use crate::checkpoint::{self, CheckpointMeta};
use crate::dtab::{DtabAttention, FeatureQueue};
use crate::encoder::Pass;
use crate::error::{Error, Result};
use crate::features::{write_features, Matrix, VideoFeatures};
use crate::heads::{loss_adv, loss_cls, loss_soft_entropy, total_loss, LossMask, LossParts, LossReport, LossWeights};
use crate::manifest::Manifest;
use crate::model::{Model, ModelConfig};
use crate::nn::{Ctx, ParamId};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::sampling::SampleMode;
use crate::synth::{SynthData, SynthSpec, SynthVideo};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Joint batch size, split evenly between source and target.
    pub batch_size: usize,
    /// GRL weight in front of the adversarial head.
    pub adv_lambda: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub losses: LossMask,
    pub weights: LossWeights,
    /// Evaluate on the target test split every this many epochs (0: only after the last).
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Write per-token transferability scores of every step.
    pub log_transferability: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            adv_lambda: 1.0,
            seed: 0,
            optimizer: AdamConfig::default(),
            losses: LossMask::default(),
            weights: LossWeights::default(),
            eval_every: 25,
            checkpoint_every: 25,
            log_transferability: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.epochs == 0 {
            return Err("train.epochs must be positive".into());
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(format!(
                "train.batch_size must be even and at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.adv_lambda >= 0.0) {
            return Err(format!("train.adv_lambda must be >= 0, got {}", self.adv_lambda));
        }
        if !self.losses.cls {
            return Err("train.losses.cls cannot be disabled".into());
        }
        self.optimizer.validate()?;
        self.weights.validate()
    }
}

/// Per-task hyperparameters `(B, k, Q, α, λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub batch_size: usize,
    pub k_tokens: usize,
    pub queue_capacity: usize,
    pub ib_weight: f64,
    pub adv_lambda: f64,
}

pub const PRESETS: [Preset; 4] = [
    Preset {
        name: "ucf-hmdb",
        batch_size: 32,
        k_tokens: 53,
        queue_capacity: 1024,
        ib_weight: 0.001,
        adv_lambda: 1.0,
    },
    Preset {
        name: "hmdb-ucf",
        batch_size: 32,
        k_tokens: 53,
        queue_capacity: 1024,
        ib_weight: 0.001,
        adv_lambda: 0.5,
    },
    Preset {
        name: "kinetics-gameplay",
        batch_size: 64,
        k_tokens: 23,
        queue_capacity: 512,
        ib_weight: 0.001,
        adv_lambda: 0.05,
    },
    Preset {
        name: "kinetics-necdrone",
        batch_size: 64,
        k_tokens: 53,
        queue_capacity: 512,
        ib_weight: 0.025,
        adv_lambda: 0.5,
    },
];

impl Preset {
    pub fn find(name: &str) -> Option<&'static Preset> {
        PRESETS.iter().find(|p| p.name == name)
    }

    pub fn apply(&self, model: &mut ModelConfig, train: &mut TrainConfig) {
        train.batch_size = self.batch_size;
        train.adv_lambda = self.adv_lambda;
        train.weights.ib = self.ib_weight;
        model.encoder.k_tokens = self.k_tokens;
        model.encoder.dtab.queue_capacity = self.queue_capacity;
    }
}

/// Small encoder and schedule for the synthetic task on one CPU core.
/// Entropy weight and adversarial λ are 0.1.
pub fn desk_config(spec: &SynthSpec) -> (ModelConfig, TrainConfig) {
    let mut model = ModelConfig {
        n_classes: spec.n_classes,
        ..ModelConfig::default()
    };
    let e = &mut model.encoder;
    e.feat_dim = spec.feat_dim;
    e.d_model = 64;
    e.heads = 4;
    e.layers = 4;
    e.k_tokens = 8;
    e.dtab_positions = vec![3];
    e.dtab.queue_capacity = 64;
    let mut train = TrainConfig {
        epochs: 30,
        batch_size: 32,
        adv_lambda: 0.1,
        eval_every: 5,
        ..TrainConfig::default()
    };
    train.optimizer.lr = 1e-3;
    train.weights.entropy = 0.1;
    train.weights.ib = 0.001;
    (model, train)
}

/// The `(B, k, Q, α, λ)` tuple as configured.
pub fn hyper_tuple(model: &ModelConfig, train: &TrainConfig) -> serde_json::Value {
    json!({
        "B": train.batch_size,
        "k": model.encoder.k_tokens,
        "Q": model.encoder.dtab.queue_capacity,
        "alpha": train.weights.ib,
        "lambda": train.adv_lambda,
    })
}

/// Source, unlabeled target and (optionally) labeled target test data.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: Dataset,
    pub target: Dataset,
    pub test: Option<Dataset>,
}

impl TrainData {
    /// Loads the three splits from manifests; `test` is optional.
    pub fn from_manifests(source: &Path, target: &Path, test: Option<&Path>) -> Result<Self> {
        let load = |p: &Path| -> Result<Dataset> { Dataset::from_manifest(&Manifest::load(p)?) };
        Ok(TrainData {
            source: load(source)?,
            target: load(target)?,
            test: test.map(load).transpose()?,
        })
    }

    pub fn from_synth(spec: &SynthSpec, data: &SynthData) -> Result<Self> {
        let set = |videos: &[SynthVideo]| {
            Dataset::new(
                spec.feat_dim,
                spec.n_classes,
                videos.iter().map(|v| v.features.clone()).collect(),
            )
        };
        Ok(TrainData {
            source: set(&data.source)?,
            target: set(&data.target_train)?,
            test: Some(set(&data.target_test)?),
        })
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::Usage("source and target training sets must be non-empty".into()));
        }
        for (name, d) in [("source", &self.source), ("target", &self.target)]
            .into_iter()
            .chain(self.test.iter().map(|t| ("test", t)))
        {
            if d.feat_dim != model.encoder.feat_dim {
                return Err(Error::Config(format!(
                    "{name} features have width {}, encoder.feat_dim is {}",
                    d.feat_dim, model.encoder.feat_dim
                )));
            }
            if d.n_classes != model.n_classes {
                return Err(Error::Config(format!(
                    "{name} data has {} classes, model.n_classes is {}",
                    d.n_classes, model.n_classes
                )));
            }
        }
        if self.source.labeled_ids().len() != self.source.len() {
            return Err(Error::Data("every source video needs a label".into()));
        }
        Ok(())
    }
}

/// Endless shuffled passes over a list of ids.
#[derive(Debug, Clone)]
struct Cycler {
    ids: Vec<String>,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(mut ids: Vec<String>) -> Self {
        ids.sort();
        Cycler {
            ids,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn take<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Vec<String> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.ids.len()).collect();
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.ids[self.order[self.pos - 1]].clone()
            })
            .collect()
    }
}

/// Everything one optimisation step computed, before the update is applied.
pub struct StepOutput {
    pub report: LossReport,
    pub grads: Vec<(ParamId, Tensor)>,
    pub ib_pairs: usize,
    pub batch: Batch,
    /// Per DTAB, `[B, k]` key-side DDE scores.
    pub transferability: Vec<Tensor>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy per class; `None` for classes without test videos.
    pub per_class: Vec<Option<f64>>,
    pub n_videos: usize,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub queues: Vec<FeatureQueue>,
    rng: ChaCha8Rng,
    source: Option<Cycler>,
    target: Option<Cycler>,
    pub epoch: usize,
    pub step: u64,
}

/// The model config actually trained: the bottleneck is switched off when its loss is masked.
pub fn effective_model_config(model: &ModelConfig, train: &TrainConfig) -> ModelConfig {
    let mut m = model.clone();
    if !train.losses.ib {
        m.encoder.dtab.information_bottleneck = false;
    }
    m
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate().map_err(Error::Config)?;
        let model = Model::new(&effective_model_config(model_cfg, cfg), cfg.seed)?;
        let queues = model.encoder.new_queues();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            adam: AdamState::new(),
            queues,
            rng,
            source: None,
            target: None,
            epoch: 0,
            step: 0,
        })
    }

    fn half(&self) -> usize {
        self.cfg.batch_size / 2
    }

    /// Optimisation steps in one epoch: one pass over the smaller domain.
    pub fn steps_per_epoch(&self, data: &TrainData) -> usize {
        (data.source.len().min(data.target.len()) / self.half()).max(1)
    }

    fn next_batch(&mut self, data: &TrainData) -> Result<Batch> {
        let half = self.half();
        let k = self.model.cfg.encoder.k_tokens;
        let src = self
            .source
            .get_or_insert_with(|| Cycler::new(data.source.ids()))
            .take(half, &mut self.rng);
        let tgt = self
            .target
            .get_or_insert_with(|| Cycler::new(data.target.ids()))
            .take(half, &mut self.rng);
        let s = make_batch(&data.source, &src, k, SampleMode::TrainRandom, &mut self.rng)?;
        let mut t = make_batch(&data.target, &tgt, k, SampleMode::TrainRandom, &mut self.rng)?;
        t.labels.iter_mut().for_each(|l| *l = None);
        Batch::concat(s, t)
    }

    /// Draws the next joint batch and computes every active loss and the
    /// gradients, without touching the parameters.
    pub fn compute_step(&mut self, data: &TrainData) -> Result<StepOutput> {
        let batch = self.next_batch(data)?;
        let half = self.half();
        let model = &self.model;
        let mask = self.cfg.losses;
        let mut ctx = Ctx::new(&model.store);
        let x = ctx.g.constant(batch.x.clone());
        let (f, aux) = model.encoder.encode(
            &mut ctx,
            x,
            Some(&batch.domains),
            Pass::Train {
                queues: &mut self.queues,
                rng: &mut self.rng,
            },
        )?;
        let logits = model.classifier.logits(&mut ctx, f)?;
        let src_rows: Vec<usize> = (0..half).collect();
        let tgt_rows: Vec<usize> = (half..2 * half).collect();
        let labels: Vec<usize> = batch.labels[..half]
            .iter()
            .map(|l| l.ok_or_else(|| Error::Data("unlabeled source video".into())))
            .collect::<Result<_>>()?;
        let src_logits = ctx.g.index_select(logits, &src_rows)?;
        let mut parts = LossParts {
            cls: Some(loss_cls(&mut ctx, src_logits, &labels)?),
            patch: aux.patch_loss,
            ..LossParts::default()
        };
        if mask.entropy {
            let tgt_logits = ctx.g.index_select(logits, &tgt_rows)?;
            parts.entropy = Some(loss_soft_entropy(&mut ctx, tgt_logits)?);
        }
        if mask.adv {
            parts.adv = Some(loss_adv(&mut ctx, &model.adversary, f, &batch.domains, self.cfg.adv_lambda)?);
        }
        if mask.ib {
            parts.ib = aux.ib_loss;
        }
        let (total, report) = total_loss(&mut ctx, &parts, &self.cfg.weights)?;
        if !report.total.is_finite() {
            return Err(Error::Data(format!("non-finite loss at step {}", self.step)));
        }
        ctx.g.backward(total)?;
        let grads = ctx.param_grads();
        let transferability = aux.per_dtab.iter().filter_map(|a| a.transferability.clone()).collect();
        Ok(StepOutput {
            report,
            grads,
            ib_pairs: aux.ib_pairs,
            batch,
            transferability,
        })
    }

    pub fn train_step(&mut self, data: &TrainData) -> Result<StepOutput> {
        let out = self.compute_step(data)?;
        adam_step(&mut self.model.store, &out.grads, &mut self.adam, &self.cfg.optimizer)?;
        self.step += 1;
        Ok(out)
    }

    /// One epoch; step records go to `metrics`, token scores to `scores`.
    pub fn train_epoch(
        &mut self,
        data: &TrainData,
        metrics: &mut dyn Write,
        mut scores: Option<&mut dyn Write>,
    ) -> Result<EpochSummary> {
        self.epoch += 1;
        let steps = self.steps_per_epoch(data);
        let mut sum = LossReport::default();
        for _ in 0..steps {
            let out = self.train_step(data)?;
            let r = &out.report;
            let rec = json!({
                "kind": "step",
                "step": self.step,
                "epoch": self.epoch,
                "cls": r.cls,
                "entropy": r.entropy,
                "adv": r.adv,
                "ib": r.ib,
                "patch": r.patch,
                "total": r.total,
                "ib_pairs": out.ib_pairs,
                "lr": self.cfg.optimizer.lr,
                "seed": self.cfg.seed,
            });
            writeln!(metrics, "{rec}")?;
            if let Some(w) = scores.as_deref_mut() {
                for (block, t) in out.transferability.iter().enumerate() {
                    let k = t.shape()[1];
                    let rows: Vec<&[f64]> = (0..t.shape()[0]).map(|i| &t.data()[i * k..(i + 1) * k]).collect();
                    let rec = json!({
                        "step": self.step,
                        "dtab": block,
                        "ids": out.batch.ids,
                        "domains": out.batch.domains,
                        "scores": rows,
                    });
                    writeln!(w, "{rec}")?;
                }
            }
            for (acc, v) in [
                (&mut sum.cls, r.cls),
                (&mut sum.entropy, r.entropy),
                (&mut sum.adv, r.adv),
                (&mut sum.ib, r.ib),
                (&mut sum.patch, r.patch),
                (&mut sum.total, r.total),
            ] {
                *acc += v / steps as f64;
            }
        }
        sum.w_entropy = self.cfg.weights.entropy;
        sum.w_ib = self.cfg.weights.ib;
        sum.w_patch = self.cfg.weights.patch;
        let summary = EpochSummary {
            epoch: self.epoch,
            steps,
            mean: sum,
        };
        writeln!(
            metrics,
            "{}",
            json!({"kind": "epoch", "epoch": self.epoch, "steps": steps, "mean": summary.mean})
        )?;
        Ok(summary)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.cfg.seed,
            param_hash: self.model.store.hash(),
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// Pooled features `f` of every video, in `ids` order, with center-frame sampling.
pub fn encode_videos(model: &Model, data: &Dataset, ids: &[String]) -> Result<Vec<Vec<f64>>> {
    let k = model.cfg.encoder.k_tokens;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let batch = make_batch(data, chunk, k, SampleMode::EvalCenter, &mut rng)?;
        let mut ctx = Ctx::new(&model.store);
        let x = ctx.g.constant(batch.x);
        let (f, _) = model.encoder.encode(&mut ctx, x, Some(&batch.domains), Pass::Eval)?;
        let f = ctx.g.value(f);
        out.extend((0..chunk.len()).map(|i| f.row(i).to_vec()));
    }
    Ok(out)
}

/// Top-1 accuracy over the labeled videos of `data`. With `export`, one
/// feature file per video plus `index.jsonl` are written there.
pub fn evaluate(model: &Model, data: &Dataset, export: Option<&Path>) -> Result<EvalReport> {
    let ids = data.labeled_ids();
    if ids.is_empty() {
        return Err(Error::Usage("evaluation needs labeled videos".into()));
    }
    let feats = encode_videos(model, data, &ids)?;
    let c = model.cfg.n_classes;
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    let mut index = String::new();
    if let Some(dir) = export {
        fs::create_dir_all(dir)?;
    }
    for (chunk_ids, chunk_feats) in ids.chunks(EVAL_CHUNK).zip(feats.chunks(EVAL_CHUNK)) {
        let rows: Vec<f64> = chunk_feats.iter().flatten().copied().collect();
        let f = Tensor::new(vec![chunk_ids.len(), model.cfg.encoder.d_model], rows)?;
        let mut ctx = Ctx::new(&model.store);
        let fv = ctx.g.constant(f);
        let logits = model.classifier.logits(&mut ctx, fv)?;
        let logits = ctx.g.value(logits);
        for (i, id) in chunk_ids.iter().enumerate() {
            let video = data.get(id)?;
            let label = video.label.expect("labeled id");
            if label >= c {
                return Err(Error::Data(format!("label {label} of {id} outside {c} classes")));
            }
            let pred = logits
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .expect("classes");
            totals[label] += 1;
            hits[label] += (pred == label) as usize;
            if let Some(dir) = export {
                let rel = format!("{id}.tfat");
                let fv = VideoFeatures {
                    video_id: id.clone(),
                    domain: video.domain,
                    label: Some(label),
                    frames: Matrix {
                        rows: 1,
                        cols: chunk_feats[i].len(),
                        data: chunk_feats[i].clone(),
                    },
                };
                write_features(&fv, &dir.join(&rel))?;
                index.push_str(&json!({"id": id, "path": rel, "label": label, "prediction": pred}).to_string());
                index.push('\n');
            }
        }
    }
    if let Some(dir) = export {
        fs::write(dir.join("index.jsonl"), index)?;
    }
    let n: usize = totals.iter().sum();
    Ok(EvalReport {
        accuracy: hits.iter().sum::<usize>() as f64 / n as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        n_videos: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub final_eval: Option<EvalReport>,
    pub best_eval: Option<EvalReport>,
    pub best_epoch: Option<usize>,
    pub param_hash: String,
    pub frozen_hash: String,
    pub trainable_params: usize,
    /// The metrics log, as written.
    #[serde(skip)]
    pub metrics: Vec<u8>,
}

/// Trains for `cfg.epochs` epochs. With `out`, writes `metrics.jsonl`,
/// checkpoints and `report.json` there.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &TrainData, out: Option<&Path>) -> Result<TrainOutcome> {
    data.validate(model_cfg)?;
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let mut metrics: Vec<u8> = Vec::new();
    let mut scores: Vec<u8> = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut final_eval = None;
    let mut best: Option<(usize, EvalReport)> = None;
    let ckpt_dir = out.map(|o| o.join("checkpoints"));
    writeln!(
        metrics,
        "{}",
        json!({
            "kind": "start",
            "seed": cfg.seed,
            "trainable_params": trainer.model.trainable_params(),
            "param_hash": trainer.model.store.hash(),
            "hyper": hyper_tuple(&trainer.model.cfg, cfg),
        })
    )?;
    for epoch in 1..=cfg.epochs {
        let summary = trainer.train_epoch(
            data,
            &mut metrics,
            cfg.log_transferability.then_some(&mut scores as &mut dyn Write),
        )?;
        log::info!("epoch {epoch}: total loss {:.5}", summary.mean.total);
        epochs.push(summary);
        let last = epoch == cfg.epochs;
        if let Some(test) = &data.test {
            if last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
                let r = evaluate(&trainer.model, test, None)?;
                writeln!(
                    metrics,
                    "{}",
                    json!({"kind": "eval", "epoch": epoch, "step": trainer.step, "accuracy": r.accuracy, "per_class": r.per_class})
                )?;
                log::info!("epoch {epoch}: target accuracy {:.4}", r.accuracy);
                if best.as_ref().is_none_or(|(_, b)| r.accuracy > b.accuracy) {
                    if let Some(dir) = &ckpt_dir {
                        checkpoint::save(&trainer.model, &trainer.checkpoint_meta(), &dir.join("best.tack"))?;
                    }
                    best = Some((epoch, r.clone()));
                }
                if last {
                    final_eval = Some(r);
                }
            }
        }
        if let Some(dir) = &ckpt_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(
                    &trainer.model,
                    &trainer.checkpoint_meta(),
                    &dir.join(format!("epoch_{epoch:04}.tack")),
                )?;
            }
            if last {
                checkpoint::save(&trainer.model, &trainer.checkpoint_meta(), &dir.join("final.tack"))?;
            }
        }
    }
    let outcome = TrainOutcome {
        epochs,
        final_eval,
        best_epoch: best.as_ref().map(|(e, _)| *e),
        best_eval: best.map(|(_, r)| r),
        param_hash: trainer.model.store.hash(),
        frozen_hash: trainer.model.store.frozen_hash(),
        trainable_params: trainer.model.trainable_params(),
        metrics,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.jsonl"), &outcome.metrics)?;
        if cfg.log_transferability {
            fs::write(dir.join("transferability.jsonl"), &scores)?;
        }
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&outcome)? + "\n")?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Components,
    Losses,
    Positions,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Components => "components",
            Protocol::Losses => "losses",
            Protocol::Positions => "positions",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "components" => Ok(Protocol::Components),
            "losses" => Ok(Protocol::Losses),
            "positions" => Ok(Protocol::Positions),
            _ => Err(format!("unknown protocol {s:?} (expected components, losses or positions)")),
        }
    }
}

/// One configuration of an ablation protocol.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: &'static str,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The rows of `protocol`, derived from the base configuration.
///
/// Positions follow one-based block numbering: "odd" is blocks 1, 3, ...
pub fn variants(protocol: Protocol, model: &ModelConfig, train: &TrainConfig) -> Vec<Variant> {
    let layers = model.encoder.layers;
    let with = |label, edit: &dyn Fn(&mut ModelConfig, &mut TrainConfig)| {
        let (mut m, mut t) = (model.clone(), train.clone());
        edit(&mut m, &mut t);
        Variant {
            label,
            model: m,
            train: t,
        }
    };
    let last = vec![layers - 1];
    match protocol {
        Protocol::Components => vec![
            with("standard", &|m, _| m.encoder.dtab_positions.clear()),
            with("mdta", &|m, t| {
                m.encoder.dtab_positions = last.clone();
                m.encoder.dtab.attention = DtabAttention::Mdta;
                m.encoder.dtab.information_bottleneck = false;
                t.losses.ib = false;
            }),
            with("ib", &|m, t| {
                m.encoder.dtab_positions = last.clone();
                m.encoder.dtab.attention = DtabAttention::SelfAttention;
                m.encoder.dtab.information_bottleneck = true;
                t.losses.ib = true;
            }),
            with("dtab", &|m, t| {
                m.encoder.dtab_positions = last.clone();
                m.encoder.dtab.attention = DtabAttention::Mdta;
                m.encoder.dtab.information_bottleneck = true;
                t.losses.ib = true;
            }),
        ],
        Protocol::Losses => {
            let row = |label, entropy, adv, ib| {
                with(label, &move |m: &mut ModelConfig, t: &mut TrainConfig| {
                    m.encoder.dtab_positions = vec![layers - 1];
                    m.encoder.dtab.attention = DtabAttention::Mdta;
                    m.encoder.dtab.information_bottleneck = true;
                    t.losses = LossMask {
                        cls: true,
                        entropy,
                        adv,
                        ib,
                    };
                })
            };
            vec![
                row("cls", false, false, false),
                row("cls+entropy", true, false, false),
                row("cls+entropy+adv", true, true, false),
                row("cls+entropy+ib", true, false, true),
                row("all", true, true, true),
            ]
        }
        Protocol::Positions => {
            let row = |label, positions: Vec<usize>| {
                with(label, &move |m: &mut ModelConfig, t: &mut TrainConfig| {
                    m.encoder.dtab_positions = positions.clone();
                    m.encoder.dtab.attention = DtabAttention::Mdta;
                    m.encoder.dtab.information_bottleneck = true;
                    t.losses.ib = true;
                })
            };
            vec![
                row("all", (0..layers).collect()),
                row("first", vec![0]),
                row("even", (0..layers).filter(|b| (b + 1) % 2 == 0).collect()),
                row("odd", (0..layers).filter(|b| (b + 1) % 2 == 1).collect()),
                row("last", vec![layers - 1]),
            ]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dtab_positions: Vec<usize>,
    pub attention: DtabAttention,
    pub information_bottleneck: bool,
    pub losses: LossMask,
    /// Final target accuracy per seed.
    pub accuracy: Vec<f64>,
    pub best_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_best_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Tab-separated rendering, one line per row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("protocol\tlabel\tmean_accuracy\tmean_best_accuracy\tper_seed\n");
        for r in &self.rows {
            let per: Vec<String> = r.accuracy.iter().map(|a| format!("{a:.4}")).collect();
            s.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{}\n",
                self.protocol,
                r.label,
                r.mean_accuracy,
                r.mean_best_accuracy,
                per.join(",")
            ));
        }
        s
    }
}

/// Results of finished runs keyed by their full configuration, so rows
/// shared between protocols train once.
#[derive(Debug, Default)]
pub struct RunCache {
    runs: HashMap<String, (f64, f64)>,
}

impl RunCache {
    pub fn new() -> Self {
        RunCache::default()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Trains every row of `protocol` once per seed and reports target accuracy.
pub fn run_ablation(
    protocol: Protocol,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    seeds: &[u64],
    cache: &mut RunCache,
    out: Option<&Path>,
) -> Result<AblationTable> {
    if data.test.is_none() {
        return Err(Error::Usage("ablations need a labeled target test set".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Usage("ablations need at least one seed".into()));
    }
    let mut rows = Vec::new();
    for v in variants(protocol, model, train_cfg) {
        let mut accuracy = Vec::new();
        let mut best_accuracy = Vec::new();
        for &seed in seeds {
            let t = TrainConfig { seed, ..v.train.clone() };
            let m = effective_model_config(&v.model, &t);
            let key = serde_json::to_string(&(&m, &t))?;
            let (fin, best) = match cache.runs.get(&key) {
                Some(r) => *r,
                None => {
                    let run_dir: Option<PathBuf> = out.map(|o| o.join(format!("{protocol}_{}_seed{seed}", v.label)));
                    let o = train(&m, &t, data, run_dir.as_deref())?;
                    let fin = o.final_eval.map(|e| e.accuracy).unwrap_or(f64::NAN);
                    let best = o.best_eval.map(|e| e.accuracy).unwrap_or(f64::NAN);
                    log::info!("{protocol}/{} seed {seed}: final {fin:.4}, best {best:.4}", v.label);
                    cache.runs.insert(key, (fin, best));
                    (fin, best)
                }
            };
            accuracy.push(fin);
            best_accuracy.push(best);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(AblationRow {
            label: v.label.to_string(),
            dtab_positions: v.model.encoder.dtab_positions.clone(),
            attention: v.model.encoder.dtab.attention,
            information_bottleneck: v.model.encoder.dtab.information_bottleneck && v.train.losses.ib,
            losses: v.train.losses,
            mean_accuracy: mean(&accuracy),
            mean_best_accuracy: mean(&best_accuracy),
            accuracy,
            best_accuracy,
        });
    }
    let table = AblationTable {
        protocol,
        seeds: seeds.to_vec(),
        rows,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("ablation_{protocol}.json")), serde_json::to_string_pretty(&table)? + "\n")?;
        fs::write(dir.join(format!("ablation_{protocol}.tsv")), table.to_tsv())?;
    }
    Ok(table)
}
