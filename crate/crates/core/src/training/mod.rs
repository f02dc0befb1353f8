//! In-batch sampled-softmax retrieval loss, auxiliary heads, and the
//! optimization loop.

use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Event, TrainingExample, assemble_batch};
use crate::error::{Result, UumError};
use crate::model::{Model, save_checkpoint};
use crate::numerics::{AdamConfig, AdamState, ParamStore, Tape, Var, adam_update, log_sum_exp};

pub use crate::model::{load_checkpoint, load_checkpoint_as};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_domain: f64,
    pub lambda_property: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            lambda_domain: 1.0,
            lambda_property: 0.1,
            seed: 7,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(UumError::Config(format!(
                "batch_size {} too small: in-batch negatives need at least 2 examples",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(UumError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.lambda_domain < 0.0 || self.lambda_property < 0.0 {
            return Err(UumError::Config("learning_rate must be positive and loss weights non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub retrieval: f64,
    pub domain: f64,
    pub property: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = retrieval + λ_domain·domain + λ_property·property`, in that order.
    pub fn combine(retrieval: f64, domain: f64, property: f64, lambda_domain: f64, lambda_property: f64) -> Self {
        let total = retrieval + lambda_domain * domain + lambda_property * property;
        Self { retrieval, domain, property, total }
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [("retrieval", self.retrieval), ("domain", self.domain), ("property", self.property), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Candidate permissions for in-batch negatives: row `i` lists example `i`'s
/// own label (the positive, index `i`) and every other label, except labels
/// that are the same item in the same domain as the positive.
#[derive(Clone, Debug, PartialEq)]
pub struct InBatchCandidates {
    pub size: usize,
    /// Row-major `B×B`.
    pub allowed: Vec<bool>,
    /// Masked collisions per row.
    pub collisions: Vec<usize>,
}

pub fn in_batch_candidates(labels: &[Event]) -> Result<InBatchCandidates> {
    let b = labels.len();
    if b < 2 {
        return Err(UumError::Config(format!("in-batch negatives need at least 2 examples, got {b}")));
    }
    let mut allowed = vec![true; b * b];
    let mut collisions = vec![0; b];
    for i in 0..b {
        for j in 0..b {
            if i != j && labels[i].item_key() == labels[j].item_key() {
                allowed[i * b + j] = false;
                collisions[i] += 1;
            }
        }
    }
    Ok(InBatchCandidates { size: b, allowed, collisions })
}

/// Cross-entropy of the softmax over permitted candidates at `positive`.
pub fn sampled_softmax_loss(scores: &[f64], positive: usize, allowed: Option<&[bool]>) -> Result<f64> {
    if positive >= scores.len() || allowed.is_some_and(|a| !a[positive]) {
        return Err(UumError::Numeric(format!("positive candidate {positive} is masked or missing")));
    }
    let lse = log_sum_exp(scores, allowed).expect("positive is permitted");
    Ok(lse - scores[positive])
}

/// Tape handles for the three loss terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub retrieval: Var,
    pub domain: Var,
    pub property: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, cfg: &TrainConfig) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown { total: v(self.total), ..LossBreakdown::combine(v(self.retrieval), v(self.domain), v(self.property), cfg.lambda_domain, cfg.lambda_property) }
    }
}

/// Builds the multi-task loss for one batch on `tape`.
pub fn multitask_loss(model: &Model, tape: &mut Tape, store: &ParamStore, batch: &Batch, cfg: &TrainConfig) -> Result<LossVars> {
    let b = batch.len();
    let cands = in_batch_candidates(&batch.labels)?;
    let out = model.forward(tape, store, batch)?;

    let pairs = tape.pairwise_add(out.user, out.target);
    let scores = model.score_head(tape, store, pairs);
    let scores = tape.reshape(scores, &[b, b]);
    let diagonal: Vec<usize> = (0..b).collect();
    let retrieval = tape.cross_entropy(scores, &diagonal, Some(&cands.allowed))?;

    let merged = tape.add(out.user, out.target);
    let domain_logits = model.domain_head(tape, store, merged);
    let domains: Vec<usize> = batch.labels.iter().map(|e| e.domain.index()).collect();
    let domain = tape.cross_entropy(domain_logits, &domains, None)?;
    let prop_pred = model.property_head(tape, store, merged);
    let targets: Vec<f64> = batch.labels.iter().map(|e| e.property).collect();
    let property = tape.mse(prop_pred, &targets);

    let wd = tape.scale(domain, cfg.lambda_domain);
    let wp = tape.scale(property, cfg.lambda_property);
    let partial = tape.add(retrieval, wd);
    let total = tape.add(partial, wp);
    Ok(LossVars { retrieval, domain, property, total })
}

/// Loss of one batch without gradients.
pub fn batch_loss(model: &Model, batch: &Batch, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = multitask_loss(model, &mut tape, &model.store, batch, cfg)?;
    Ok(vars.breakdown(&tape, cfg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub trace: Vec<LossRecord>,
    pub steps_per_epoch: usize,
}

impl TrainOutcome {
    /// Mean retrieval loss of each epoch.
    pub fn epoch_mean_retrieval(&self) -> Vec<f64> {
        let epochs = self.trace.last().map_or(0, |r| r.epoch + 1);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.trace.iter().filter(|r| r.epoch == e).map(|r| r.loss.retrieval).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }
}

/// Batches of one epoch in seeded shuffled order. A trailing batch with a
/// single example is dropped, since it has no in-batch negative.
pub fn epoch_batches(examples: &[TrainingExample], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(cfg.batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// One optimization step; returns the loss measured before the update.
pub fn train_step(model: &mut Model, batch: &Batch, cfg: &TrainConfig, adam: &mut AdamState, step: usize) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = multitask_loss(model, &mut tape, &model.store, batch, cfg)?;
    let loss = vars.breakdown(&tape, cfg);
    if let Some(term) = loss.first_non_finite() {
        return Err(UumError::NonFiniteLoss { step, term });
    }
    let grads = tape.backward(vars.total)?.param_grads(&tape, &model.store);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(UumError::NonFiniteLoss { step, term: "gradient" });
    }
    adam_update(&mut model.store, &grads, adam, &cfg.adam());
    Ok(loss)
}

/// Trains `model` in place. Steps are numbered from 1. When `checkpoint` is
/// given it is written every `eval_every` steps and after the last step.
pub fn train(model: &mut Model, examples: &[TrainingExample], cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = epoch_batches(examples, cfg, 0);
    if first.is_empty() {
        return Err(UumError::Data(format!("{} training examples do not fill a batch of 2", examples.len())));
    }
    let mut adam = AdamState::new(&model.store);
    let mut outcome = TrainOutcome { trace: Vec::new(), steps_per_epoch: first.len() };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = if epoch == 0 { first.clone() } else { epoch_batches(examples, cfg, epoch) };
        for idx in batches {
            step += 1;
            let picked: Vec<TrainingExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let batch = assemble_batch(&picked);
            let loss = train_step(model, &batch, cfg, &mut adam, step)?;
            outcome.trace.push(LossRecord { step, epoch, loss });
            if let (Some(path), true) = (checkpoint, cfg.eval_every > 0 && step % cfg.eval_every == 0) {
                save_checkpoint(model, path)?;
            }
        }
        log::info!(
            "epoch {} done: mean retrieval loss {:.5}",
            epoch + 1,
            outcome.epoch_mean_retrieval()[epoch]
        );
    }
    if let Some(path) = checkpoint {
        save_checkpoint(model, path)?;
    }
    Ok(outcome)
}

/// `step,retrieval,domain,property,total` with shortest round-trip floats.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,retrieval,domain,property,total\n");
    for r in trace {
        let l = &r.loss;
        out.push_str(&format!("{},{},{},{},{}\n", r.step, l.retrieval, l.domain, l.property, l.total));
    }
    out
}
