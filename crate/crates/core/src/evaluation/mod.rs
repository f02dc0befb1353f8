//! Sampled-negative next-event retrieval metrics.
//!
//! Every test example ranks its true next event against `N` negatives drawn
//! uniformly from all items of all domains. The positive loses every tie.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, DomainId, Event, Intent, ItemCatalog, TrainingExample};
use crate::error::{Result, UumError};
use crate::model::{Model, UNKNOWN_CATEGORY};
use crate::numerics::{Tensor, compensated_sum};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_NEGATIVES: usize = 50_000;
/// Negative count used when the item space is too small for the default.
pub const SMALL_VOCAB_NEGATIVES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// `None` picks [`DEFAULT_NEGATIVES`], or [`SMALL_VOCAB_NEGATIVES`] when
    /// the item space holds no more than `DEFAULT_NEGATIVES` items.
    pub negatives: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, negatives: None, seed: 7 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(UumError::Config("eval.k must be at least 1".into()));
        }
        if self.negatives == Some(0) {
            return Err(UumError::Config("eval.negatives must be at least 1".into()));
        }
        Ok(())
    }

    /// Negative count for an item space of `total` items, before clamping.
    pub fn negatives_for(&self, total: u64) -> usize {
        self.negatives.unwrap_or(if total > DEFAULT_NEGATIVES as u64 { DEFAULT_NEGATIVES } else { SMALL_VOCAB_NEGATIVES })
    }
}

/// Dense numbering of every `(domain, item)` pair, domain-major.
#[derive(Clone, Debug)]
pub struct CandidateSpace {
    offsets: Vec<u64>,
    total: u64,
}

impl CandidateSpace {
    pub fn new(manifest: &DatasetManifest) -> Self {
        let mut offsets = Vec::with_capacity(manifest.domain_count());
        let mut total = 0u64;
        for d in &manifest.domains {
            offsets.push(total);
            total += d.vocab_size as u64;
        }
        Self { offsets, total }
    }

    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn index(&self, domain: DomainId, item: u32) -> u64 {
        self.offsets[domain.index()] + item as u64
    }

    pub fn key(&self, index: u64) -> (DomainId, u32) {
        let d = self.offsets.partition_point(|&o| o <= index) - 1;
        (DomainId(d as u16), (index - self.offsets[d]) as u32)
    }
}

/// Draws `n` distinct negatives for test example `example`, excluding the
/// positive. `n` is clamped to `|V| − 1` with a warning.
pub fn sample_negatives(space: &CandidateSpace, positive: (DomainId, u32), n: usize, seed: u64, example: u64) -> Result<Vec<u64>> {
    if space.len() <= 1 {
        return Err(UumError::Data(format!("cannot sample negatives from {} items", space.len())));
    }
    let available = space.len() - 1;
    let n = if n as u64 > available {
        log::warn!("requested {n} negatives but only {available} items are available; clamping");
        available as usize
    } else {
        n
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(example);
    let pos = space.index(positive.0, positive.1);
    let picks = rand::seq::index::sample(&mut rng, available as usize, n);
    Ok(picks.into_iter().map(|i| if i as u64 >= pos { i as u64 + 1 } else { i as u64 }).collect())
}

/// 1 + the number of candidates scoring at least as high as the positive.
pub fn rank_from_scores(scores: &[f64], positive: usize) -> Result<usize> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(UumError::Numeric(format!("candidate {i} has non-finite score {}", scores[i])));
    }
    let p = scores[positive];
    Ok(1 + scores.iter().enumerate().filter(|&(i, &s)| i != positive && s >= p).count())
}

/// Rank of `positive` among `negatives` for the user behind `context`.
pub fn rank_positive(model: &Model, context: &[Event], positive: &Event, negatives: &[Event]) -> Result<usize> {
    if context.is_empty() {
        return Err(UumError::Data("cannot rank against an empty context".into()));
    }
    let h = model.user_embedding(context)?;
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(positive.clone());
    candidates.extend_from_slice(negatives);
    let targets = model.target_representations(&candidates)?;
    rank_from_scores(&model.score_candidates(&h, &targets)?, 0)
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 } else { 0.0 }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k { 1.0 / (1.0 + rank as f64).log2() } else { 0.0 }
}

/// Sort-based reference for the metrics: orders candidates by descending
/// score, placing the positive after every candidate it ties with.
pub fn metric_oracle(scores: &[f64], positive: usize, k: usize) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then((a == positive).cmp(&(b == positive))));
    let rank = order.iter().position(|&i| i == positive).unwrap() + 1;
    let ndcg = if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 };
    (if rank <= k { 1.0 } else { 0.0 }, ndcg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub count: usize,
    pub k: usize,
    /// Negatives per example after clamping.
    pub negatives: usize,
    pub config: EvalConfig,
    pub checkpoint_id: Option<String>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "recall_at_k,ndcg_at_k,count,k,negatives,seed,checkpoint_id";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.recall_at_k,
            self.ndcg_at_k,
            self.count,
            self.k,
            self.negatives,
            self.config.seed,
            self.checkpoint_id.as_deref().unwrap_or("")
        )
    }
}

/// Evaluates an arbitrary scorer. `score(i, example, candidates)` must return
/// one score per candidate; candidate 0 is the positive.
pub fn evaluate_scorer<F>(manifest: &DatasetManifest, test: &[TrainingExample], cfg: &EvalConfig, score: F) -> Result<EvalReport>
where
    F: Fn(usize, &TrainingExample, &[u64]) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    if test.is_empty() {
        return Err(UumError::Data("empty test set".into()));
    }
    let space = CandidateSpace::new(manifest);
    let n = cfg.negatives_for(space.len()).min(space.len().saturating_sub(1) as usize);
    let per_example: Vec<(f64, f64)> = test
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            manifest
                .check_event(&ex.label)
                .map_err(|msg| UumError::Data(format!("test example {i} label: {msg}")))?;
            let positive = ex.label.item_key();
            let mut candidates = vec![space.index(positive.0, positive.1)];
            candidates.extend(sample_negatives(&space, positive, n, cfg.seed, i as u64)?);
            let scores = score(i, ex, &candidates)?;
            if scores.len() != candidates.len() {
                return Err(UumError::Shape(format!("scorer returned {} scores for {} candidates", scores.len(), candidates.len())));
            }
            let rank = rank_from_scores(&scores, 0)?;
            Ok((recall_at_k(rank, cfg.k), ndcg_at_k(rank, cfg.k)))
        })
        .collect::<Result<_>>()?;
    let count = per_example.len() as f64;
    Ok(EvalReport {
        recall_at_k: compensated_sum(per_example.iter().map(|m| m.0)) / count,
        ndcg_at_k: compensated_sum(per_example.iter().map(|m| m.1)) / count,
        count: per_example.len(),
        k: cfg.k,
        negatives: n,
        config: cfg.clone(),
        checkpoint_id: None,
    })
}

/// Target representations of every item in the candidate space, in space
/// order. Items never observed get null categorical rows.
pub fn candidate_targets(model: &Model, catalog: &ItemCatalog) -> Result<Tensor> {
    let manifest = &model.manifest;
    let events: Vec<Event> = manifest
        .domains
        .iter()
        .enumerate()
        .flat_map(|(d, spec)| {
            let domain = DomainId(d as u16);
            (0..spec.vocab_size).map(move |item| Event {
                domain,
                item_id: item,
                timestamp: 0,
                intent: Intent::Low,
                categorical: catalog
                    .categorical(domain, item)
                    .map_or_else(|| vec![UNKNOWN_CATEGORY; spec.categorical_cardinalities.len()], <[u32]>::to_vec),
                property: 0.0,
            })
        })
        .collect();
    let f = model.latent_dim();
    let chunks: Vec<Tensor> = events.par_chunks(1024).map(|c| model.target_representations(c)).collect::<Result<_>>()?;
    Tensor::new(vec![events.len(), f], chunks.into_iter().flat_map(Tensor::into_data).collect())
}

/// Evaluates `model` on held-out final windows.
pub fn evaluate(model: &Model, test: &[TrainingExample], catalog: &ItemCatalog, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(UumError::Data("empty test set".into()));
    }
    let f = model.latent_dim();
    let targets = candidate_targets(model, catalog)?;
    let users: Vec<Tensor> = test
        .par_chunks(64)
        .map(|chunk| model.user_embeddings(&chunk.iter().map(|ex| ex.context.as_slice()).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let h = |i: usize| &users[i / 64].data()[(i % 64) * f..(i % 64 + 1) * f];
    evaluate_scorer(&model.manifest, test, cfg, |i, _, candidates| {
        let mut rows = Vec::with_capacity(candidates.len() * f);
        for &c in candidates {
            let c = c as usize;
            rows.extend_from_slice(&targets.data()[c * f..(c + 1) * f]);
        }
        model.score_candidates(h(i), &Tensor::new(vec![candidates.len(), f], rows)?)
    })
}
