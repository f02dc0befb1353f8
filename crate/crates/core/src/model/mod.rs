//! Event featurizer, the three encoder variants, attention pooling, target
//! tower, and the prediction heads.

mod checkpoint;
mod config;
mod encoder;
mod params;

use std::rc::Rc;

pub use checkpoint::{
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION, checkpoint_id, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint,
};
pub use config::{ModelConfig, Variant};
pub use params::{EncoderParams, IbLayer, ModelParams};

use crate::data::{Batch, DatasetManifest, Event, Token};
use crate::error::{Result, UumError};
use crate::numerics::{AttentionMask, ParamStore, Tape, Tensor, Var};

/// `c0 ⊙ (c·W + b) + c`.
pub fn cross_layer(tape: &mut Tape, c0: Var, c: Var, w: Var, b: Var) -> Var {
    let lin = tape.linear(c, w, b);
    let crossed = tape.mul(c0, lin);
    tape.add(crossed, c)
}

/// A model instance: configuration, the domains it was built for, and its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub manifest: DatasetManifest,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct BatchOutputs {
    /// `B×f` pooled user embeddings h*.
    pub user: Var,
    /// `B×f` target representations of the label events.
    pub target: Var,
}

/// Result of merging one user embedding with one target representation.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeOutput {
    pub merged: Vec<f64>,
    pub score: f64,
    pub domain_logits: Vec<f64>,
    pub property: f64,
}

/// Categorical value for an item whose attributes were never observed. It
/// selects the slot's null row.
pub const UNKNOWN_CATEGORY: u32 = u32::MAX;

/// Rows per forward pass in the inference helpers.
const INFERENCE_CHUNK: usize = 64;

impl Model {
    pub fn new(config: ModelConfig, manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        config.validate(&manifest)?;
        let mut store = ParamStore::new();
        let params = ModelParams::init(&config, &manifest, &mut store);
        Ok(Self { config, manifest, store, params })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Concatenated lookup features for each token, then the shared 2-layer
    /// projection to `f`, plus the positional embedding when `positions` is given.
    pub fn featurize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[Option<&Event>],
        positions: Option<&[usize]>,
        zero_property: bool,
    ) -> Result<Var> {
        let n = tokens.len();
        let m = &self.manifest;
        let p = &self.params;
        let d_count = m.domain_count();
        for e in tokens.iter().flatten() {
            let checked = if e.categorical.contains(&UNKNOWN_CATEGORY) {
                let mut known = (*e).clone();
                known.categorical.iter_mut().filter(|v| **v == UNKNOWN_CATEGORY).for_each(|v| *v = 0);
                m.check_event(&known)
            } else {
                m.check_event(e)
            };
            checked.map_err(|msg| UumError::Data(format!("cannot featurize event: {msg}")))?;
        }

        let mut parts = Vec::new();
        for (d, spec) in m.domains.iter().enumerate() {
            let null = spec.vocab_size as usize;
            let rows: Vec<usize> = tokens
                .iter()
                .map(|t| match t {
                    Some(e) if e.domain.index() == d => e.item_id as usize,
                    Some(_) => null,
                    None => null + 1,
                })
                .collect();
            let table = tape.param(store, p.item_tables[d]);
            parts.push(tape.select_rows(table, &rows));
        }
        for ((d, slot, card), &table) in m.categorical_slots().into_iter().zip(&p.categorical_tables) {
            let null = card as usize;
            let rows: Vec<usize> = tokens
                .iter()
                .map(|t| match t {
                    Some(e) if e.domain == d && e.categorical[slot] != UNKNOWN_CATEGORY => e.categorical[slot] as usize,
                    Some(_) => null,
                    None => null + 1,
                })
                .collect();
            let table = tape.param(store, table);
            parts.push(tape.select_rows(table, &rows));
        }
        let domain_rows: Vec<usize> = tokens.iter().map(|t| t.map_or(d_count, |e| e.domain.index())).collect();
        let table = tape.param(store, p.domain_table);
        parts.push(tape.select_rows(table, &domain_rows));
        let property: Vec<f64> = tokens
            .iter()
            .map(|t| match t {
                Some(e) if !zero_property => e.property,
                _ => 0.0,
            })
            .collect();
        parts.push(tape.leaf(Tensor::from_parts(vec![n, 1], property)));

        let x = tape.concat_cols(&parts);
        let (w1, b1) = (tape.param(store, p.feature_w1), tape.param(store, p.feature_b1));
        let (w2, b2) = (tape.param(store, p.feature_w2), tape.param(store, p.feature_b2));
        let hid = tape.linear(x, w1, b1);
        let hid = tape.relu(hid);
        let out = tape.linear(hid, w2, b2);
        match positions {
            None => Ok(out),
            Some(pos) => {
                let cap = self.config.positional_capacity;
                if let Some(&bad) = pos.iter().find(|&&q| q >= cap) {
                    return Err(UumError::Config(format!(
                        "position {bad} exceeds positional capacity {cap}; raise positional_capacity or shorten windows"
                    )));
                }
                let table = tape.param(store, p.positions);
                let pe = tape.select_rows(table, pos);
                Ok(tape.add(out, pe))
            }
        }
    }

    /// Encodes equal-length token rows (real events and pads) into
    /// `(B·M)×f` token outputs, using the configured encoder variant.
    pub fn encode_tokens(&self, tape: &mut Tape, store: &ParamStore, rows: &[Vec<Token>]) -> Result<Var> {
        let grid = encoder::TokenGrid::new(rows)?;
        if grid.m > self.config.positional_capacity {
            return Err(UumError::Config(format!(
                "context length {} exceeds positional capacity {}",
                grid.m, self.config.positional_capacity
            )));
        }
        let positions: Vec<usize> = (0..grid.b * grid.m).map(|i| i % grid.m).collect();
        let h = self.featurize(tape, store, &grid.flat, Some(&positions), false)?;
        encoder::encode(self, tape, store, &grid, h)
    }

    /// Masked softmax attention pooling of token outputs into one row per example.
    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, real: &[Vec<bool>]) -> Result<Var> {
        let b = real.len();
        let m = real.first().map_or(0, Vec::len);
        let w = tape.param(store, self.params.pool_w);
        let scores = tape.matmul(tokens, w);
        let scores = tape.reshape(scores, &[b, m]);
        let mask = Rc::new(AttentionMask::from_fn(b, m, |i, j| real[i][j]));
        let weights = tape.softmax_rows(scores, Some(&mask))?;
        Ok(tape.segment_weighted_sum(weights, tokens))
    }

    /// Pooled user embeddings for padded token rows.
    pub fn user_tokens(&self, tape: &mut Tape, store: &ParamStore, rows: &[Vec<Token>]) -> Result<Var> {
        let tokens = self.encode_tokens(tape, store, rows)?;
        let real: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|t| matches!(t, Token::Event(_))).collect()).collect();
        self.pool(tape, store, tokens, &real)
    }

    /// Target tower: features without position or property, cross layers, 2-layer FFN.
    pub fn target(&self, tape: &mut Tape, store: &ParamStore, events: &[&Event]) -> Result<Var> {
        let p = &self.params;
        let tokens: Vec<Option<&Event>> = events.iter().map(|&e| Some(e)).collect();
        let c0 = self.featurize(tape, store, &tokens, None, true)?;
        let mut c = c0;
        for &(w, b) in &p.cross {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            c = cross_layer(tape, c0, c, w, b);
        }
        let (w1, b1) = (tape.param(store, p.target_w1), tape.param(store, p.target_b1));
        let (w2, b2) = (tape.param(store, p.target_w2), tape.param(store, p.target_b2));
        let hid = tape.linear(c, w1, b1);
        let hid = tape.relu(hid);
        Ok(tape.linear(hid, w2, b2))
    }

    /// Scalar retrieval score per merged row: `n×f → n×1`.
    pub fn score_head(&self, tape: &mut Tape, store: &ParamStore, merged: Var) -> Var {
        let p = &self.params;
        let (w1, w2) = (tape.param(store, p.score_w1), tape.param(store, p.score_w2));
        let hid = tape.matmul(merged, w1);
        let hid = tape.relu(hid);
        tape.matmul(hid, w2)
    }

    pub fn domain_head(&self, tape: &mut Tape, store: &ParamStore, merged: Var) -> Var {
        let (w, b) = (tape.param(store, self.params.domain_w), tape.param(store, self.params.domain_b));
        tape.linear(merged, w, b)
    }

    pub fn property_head(&self, tape: &mut Tape, store: &ParamStore, merged: Var) -> Var {
        let (w, b) = (tape.param(store, self.params.property_w), tape.param(store, self.params.property_b));
        tape.linear(merged, w, b)
    }

    /// User embeddings and label targets for a training batch.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Result<BatchOutputs> {
        let user = self.user_tokens(tape, store, &batch.tokens)?;
        let labels: Vec<&Event> = batch.labels.iter().collect();
        let target = self.target(tape, store, &labels)?;
        Ok(BatchOutputs { user, target })
    }

    /// h* for each context. Contexts are padded to a common length in chunks;
    /// padding does not affect the result.
    pub fn user_embeddings(&self, contexts: &[&[Event]]) -> Result<Tensor> {
        let f = self.latent_dim();
        let mut out = Vec::with_capacity(contexts.len() * f);
        for chunk in contexts.chunks(INFERENCE_CHUNK) {
            let m = chunk.iter().map(|c| c.len()).max().unwrap_or(0);
            let rows: Vec<Vec<Token>> = chunk
                .iter()
                .map(|c| {
                    let mut r: Vec<Token> = c.iter().cloned().map(Token::Event).collect();
                    r.resize(m, Token::Pad);
                    r
                })
                .collect();
            let mut tape = Tape::new();
            let h = self.user_tokens(&mut tape, &self.store, &rows)?;
            tape.status()?;
            out.extend_from_slice(tape.value(h).data());
        }
        Tensor::new(vec![contexts.len(), f], out)
    }

    pub fn user_embedding(&self, context: &[Event]) -> Result<Vec<f64>> {
        Ok(self.user_embeddings(&[context])?.into_data())
    }

    pub fn target_representations(&self, events: &[Event]) -> Result<Tensor> {
        let f = self.latent_dim();
        let mut out = Vec::with_capacity(events.len() * f);
        for chunk in events.chunks(4 * INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let refs: Vec<&Event> = chunk.iter().collect();
            let t = self.target(&mut tape, &self.store, &refs)?;
            tape.status()?;
            out.extend_from_slice(tape.value(t).data());
        }
        Tensor::new(vec![events.len(), f], out)
    }

    /// Retrieval score of `h` against every row of `targets`.
    pub fn score_candidates(&self, h: &[f64], targets: &Tensor) -> Result<Vec<f64>> {
        let f = self.latent_dim();
        if h.len() != f || targets.cols() != f {
            return Err(UumError::Shape(format!("score_candidates: h has {} dims, targets {}", h.len(), targets.cols())));
        }
        let mut tape = Tape::new();
        let hv = tape.leaf(Tensor::from_parts(vec![1, f], h.to_vec()));
        let tv = tape.leaf(targets.clone());
        let merged = tape.pairwise_add(hv, tv);
        let s = self.score_head(&mut tape, &self.store, merged);
        tape.status()?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn merge_and_score(&self, h: &[f64], t: &[f64]) -> Result<MergeOutput> {
        let f = self.latent_dim();
        if h.len() != f || t.len() != f {
            return Err(UumError::Shape(format!("merge_and_score: dims {} and {} for f={f}", h.len(), t.len())));
        }
        let merged: Vec<f64> = h.iter().zip(t).map(|(a, b)| a + b).collect();
        let mut tape = Tape::new();
        let mv = tape.leaf(Tensor::from_parts(vec![1, f], merged.clone()));
        let s = self.score_head(&mut tape, &self.store, mv);
        let d = self.domain_head(&mut tape, &self.store, mv);
        let p = self.property_head(&mut tape, &self.store, mv);
        tape.status()?;
        Ok(MergeOutput {
            merged,
            score: tape.value(s).item(),
            domain_logits: tape.value(d).data().to_vec(),
            property: tape.value(p).item(),
        })
    }
}

#[cfg(test)]
mod tests;
