use std::rc::Rc;

use super::{EncoderParams, Model};
use crate::data::{Event, Token};
use crate::error::{Result, UumError};
use crate::numerics::{AttentionMask, BlockParams, LAYER_NORM_EPS, ParamStore, Tape, Tensor, Var, segment_block};

/// `B` rows of `M` tokens, flattened row-major.
pub(super) struct TokenGrid<'a> {
    pub b: usize,
    pub m: usize,
    pub flat: Vec<Option<&'a Event>>,
}

impl<'a> TokenGrid<'a> {
    pub fn new(rows: &'a [Vec<Token>]) -> Result<Self> {
        let b = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if b == 0 || m == 0 {
            return Err(UumError::Data("cannot encode an empty batch".into()));
        }
        if rows.iter().any(|r| r.len() != m) {
            return Err(UumError::Shape("token rows must share one padded length".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.iter().all(|t| matches!(t, Token::Pad)) {
                return Err(UumError::Data(format!("example {i} has no context events")));
            }
        }
        let flat = rows.iter().flat_map(|r| r.iter().map(Token::event)).collect();
        Ok(Self { b, m, flat })
    }

    fn real(&self, i: usize, j: usize) -> bool {
        self.flat[i * self.m + j].is_some()
    }

    fn domain(&self, i: usize, j: usize) -> Option<usize> {
        self.flat[i * self.m + j].map(|e| e.domain.index())
    }
}

fn run_blocks(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[BlockParams],
    mut h: Var,
    masks: &Rc<Vec<AttentionMask>>,
    heads: usize,
) -> Result<Var> {
    for block in blocks {
        h = segment_block(tape, store, block, h, masks, heads)?;
    }
    Ok(h)
}

fn sequence_mask(real: &[bool], causal: bool) -> AttentionMask {
    AttentionMask::from_fn(real.len(), real.len(), |q, k| real[q] && real[k] && (!causal || k <= q))
        .with_pad_rows(real.iter().map(|r| !r).collect())
}

fn grid_masks(grid: &TokenGrid, causal: bool) -> Rc<Vec<AttentionMask>> {
    Rc::new(
        (0..grid.b)
            .map(|i| sequence_mask(&(0..grid.m).map(|j| grid.real(i, j)).collect::<Vec<_>>(), causal))
            .collect(),
    )
}

pub(super) fn encode(model: &Model, tape: &mut Tape, store: &ParamStore, grid: &TokenGrid, h: Var) -> Result<Var> {
    let heads = model.config.heads;
    let causal = model.config.causal;
    match &model.params.encoder {
        EncoderParams::Base { blocks } => run_blocks(tape, store, blocks, h, &grid_masks(grid, causal), heads),
        EncoderParams::DomainSpecific { private, shared } => {
            let h = private_stage(model, tape, store, private, grid, h)?;
            run_blocks(tape, store, shared, h, &grid_masks(grid, causal), heads)
        }
        EncoderParams::IbToken { seeds, layers } => encode_ib(model, tape, store, *seeds, layers, grid, h),
    }
}

/// Output of the per-domain private stage of the domain-specific encoder.
#[cfg(test)]
pub(super) fn private_outputs(model: &Model, tape: &mut Tape, store: &ParamStore, grid: &TokenGrid, h: Var) -> Result<Var> {
    match &model.params.encoder {
        EncoderParams::DomainSpecific { private, .. } => private_stage(model, tape, store, private, grid, h),
        _ => Err(UumError::Config("not a domain-specific encoder".into())),
    }
}

/// Gathers each domain's events (in order) into their own padded grid, runs
/// that domain's private blocks, and scatters the outputs back to their
/// original positions. Pad positions of the full grid come back as zeros.
fn private_stage(
    model: &Model,
    tape: &mut Tape,
    store: &ParamStore,
    private: &[Vec<BlockParams>],
    grid: &TokenGrid,
    h: Var,
) -> Result<Var> {
    let f = model.latent_dim();
    let total = grid.b * grid.m;
    let zero = tape.leaf(Tensor::zeros(&[1, f]));
    let padded = tape.concat_rows(&[h, zero]);
    let mut parts = Vec::new();
    for (d, blocks) in private.iter().enumerate() {
        let positions: Vec<Vec<usize>> = (0..grid.b)
            .map(|i| (0..grid.m).filter(|&j| grid.domain(i, j) == Some(d)).map(|j| i * grid.m + j).collect())
            .collect();
        let md = positions.iter().map(Vec::len).max().unwrap_or(0);
        if md == 0 {
            continue;
        }
        let mut gather = Vec::with_capacity(grid.b * md);
        let mut masks = Vec::with_capacity(grid.b);
        for pos in &positions {
            gather.extend(pos);
            gather.extend(std::iter::repeat_n(total, md - pos.len()));
            let real: Vec<bool> = (0..md).map(|j| j < pos.len()).collect();
            masks.push(sequence_mask(&real, model.config.causal));
        }
        let sub = tape.select_rows(padded, &gather);
        let out = run_blocks(tape, store, blocks, sub, &Rc::new(masks), model.config.heads)?;
        let keep: Vec<usize> = positions.iter().enumerate().flat_map(|(i, pos)| (0..pos.len()).map(move |j| i * md + j)).collect();
        let real_out = tape.select_rows(out, &keep);
        parts.push((real_out, positions.concat()));
    }
    Ok(tape.scatter_rows(&parts, total))
}

/// Each example's sequence is its `M` event tokens followed by one IB token
/// per domain; IB tokens of domains absent from the example are padding.
fn encode_ib(
    model: &Model,
    tape: &mut Tape,
    store: &ParamStore,
    seeds: crate::numerics::ParamId,
    layers: &[super::IbLayer],
    grid: &TokenGrid,
    h: Var,
) -> Result<Var> {
    let cfg = &model.config;
    let d_count = model.manifest.domain_count();
    let (b, m) = (grid.b, grid.m);
    let mi = m + d_count;
    let present: Vec<Vec<bool>> = (0..b)
        .map(|i| (0..d_count).map(|d| (0..m).any(|j| grid.domain(i, j) == Some(d))).collect())
        .collect();

    let event_rows: Vec<usize> = (0..b).flat_map(|i| (0..m).map(move |j| i * mi + j)).collect();
    // (example, domain, row) for every present IB token
    let ib: Vec<(usize, usize, usize)> = (0..b)
        .flat_map(|i| (0..d_count).map(move |d| (i, d, i * mi + m + d)))
        .filter(|&(i, d, _)| present[i][d])
        .collect();
    let ib_rows: Vec<usize> = ib.iter().map(|t| t.2).collect();
    let ib_example: Vec<usize> = ib.iter().map(|t| t.0).collect();

    let seed_table = tape.param(store, seeds);
    let seed_rows = tape.select_rows(seed_table, &ib.iter().map(|t| t.1).collect::<Vec<_>>());
    let mut x = tape.scatter_rows(&[(h, event_rows.clone()), (seed_rows, ib_rows.clone())], b * mi);

    let masks: Rc<Vec<AttentionMask>> = Rc::new(
        (0..b)
            .map(|i| {
                let dom = |j: usize| if j < m { grid.domain(i, j) } else { present[i][j - m].then_some(j - m) };
                let real: Vec<bool> = (0..mi).map(|j| dom(j).is_some()).collect();
                AttentionMask::from_fn(mi, mi, |q, k| {
                    let (Some(dq), Some(dk)) = (dom(q), dom(k)) else { return false };
                    if dq != dk {
                        return false;
                    }
                    let (q_event, k_event) = (q < m, k < m);
                    if cfg.causal && q_event && k_event && k > q {
                        return false;
                    }
                    !(cfg.ib_block_readout && q_event && !k_event)
                })
                .with_pad_rows(real.iter().map(|r| !r).collect())
            })
            .collect(),
    );

    let mut sum_rows = vec![0.0; b * ib.len()];
    for (p, &i) in ib_example.iter().enumerate() {
        sum_rows[i * ib.len() + p] = 1.0;
    }
    let sum_matrix = Tensor::new(vec![b, ib.len()], sum_rows)?;

    for layer in layers {
        x = segment_block(tape, store, &layer.intra, x, &masks, cfg.heads)?;
        if cfg.ib_exchange {
            let tokens = tape.select_rows(x, &ib_rows);
            let sum = tape.leaf(sum_matrix.clone());
            let summed = tape.matmul(sum, tokens);
            let (g, bias) = (tape.param(store, layer.exchange_gain), tape.param(store, layer.exchange_bias));
            let shared = tape.layer_norm_rows(summed, g, bias, LAYER_NORM_EPS);
            let spread = tape.select_rows(shared, &ib_example);
            let events = tape.select_rows(x, &event_rows);
            x = tape.scatter_rows(&[(events, event_rows.clone()), (spread, ib_rows.clone())], b * mi);
        }
        x = segment_block(tape, store, &layer.reattend, x, &masks, cfg.heads)?;
    }
    Ok(tape.select_rows(x, &event_rows))
}
