//! Post-norm transformer block with masked multi-head self-attention.

use std::rc::Rc;

use rand::Rng;

use super::{AttentionMask, ParamId, ParamStore, Tape, Var};
use crate::error::{Result, UumError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameter handles for one attention + feed-forward block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    /// Keys carry no bias: a per-query constant shift cannot change the softmax.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl BlockParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, ffn_hidden: usize, rng: &mut R) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let ff_std = (1.0 / ffn_hidden as f64).sqrt();
        let mut w = |store: &mut ParamStore, name: &str, shape: &[usize], s: f64| {
            store.add_normal(&format!("{prefix}.{name}"), shape, s, rng)
        };
        let wq = w(store, "wq", &[dim, dim], std);
        let wk = w(store, "wk", &[dim, dim], std);
        let wv = w(store, "wv", &[dim, dim], std);
        let wo = w(store, "wo", &[dim, dim], std);
        let ff1_w = w(store, "ff1.w", &[dim, ffn_hidden], std);
        let ff2_w = w(store, "ff2.w", &[ffn_hidden, dim], ff_std);
        let z = |store: &mut ParamStore, name: &str, n: usize| store.add_const(&format!("{prefix}.{name}"), &[n], 0.0);
        let o = |store: &mut ParamStore, name: &str, n: usize| store.add_const(&format!("{prefix}.{name}"), &[n], 1.0);
        Self {
            wq,
            bq: z(store, "bq", dim),
            wk,
            wv,
            bv: z(store, "bv", dim),
            wo,
            bo: z(store, "bo", dim),
            ln1_gain: o(store, "ln1.gain", dim),
            ln1_bias: z(store, "ln1.bias", dim),
            ff1_w,
            ff1_b: z(store, "ff1.b", ffn_hidden),
            ff2_w,
            ff2_b: z(store, "ff2.b", dim),
            ln2_gain: o(store, "ln2.gain", dim),
            ln2_bias: z(store, "ln2.bias", dim),
        }
    }
}

/// Concatenated per-head attention mixes `softmax(QK^T/sqrt(d_h)) V`, before
/// the output projection.
pub fn multi_head_mix(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockParams,
    h: Var,
    mask: Option<&Rc<AttentionMask>>,
    heads: usize,
) -> Result<Var> {
    let masks = single_segment(tape, h, mask);
    segment_mix(tape, store, block, h, &masks, heads)
}

fn single_segment(tape: &Tape, h: Var, mask: Option<&Rc<AttentionMask>>) -> Rc<Vec<AttentionMask>> {
    let rows = tape.value(h).rows();
    Rc::new(vec![mask.map_or_else(|| AttentionMask::full(rows), |m| (**m).clone())])
}

/// [`multi_head_mix`] over consecutive equal-length segments of `h`, one mask
/// per segment. Segments never attend to each other.
pub fn segment_mix(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockParams,
    h: Var,
    masks: &Rc<Vec<AttentionMask>>,
    heads: usize,
) -> Result<Var> {
    let dim = tape.value(h).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(UumError::Config(format!("latent dim {dim} not divisible by {heads} heads")));
    }
    let (wq, bq) = (tape.param(store, block.wq), tape.param(store, block.bq));
    let wk = tape.param(store, block.wk);
    let (wv, bv) = (tape.param(store, block.wv), tape.param(store, block.bv));
    let q = tape.linear(h, wq, bq);
    let k = tape.matmul(h, wk);
    let v = tape.linear(h, wv, bv);
    tape.segment_attention(q, k, v, masks, heads)
}

/// attention → add & norm → ReLU feed-forward → add & norm.
pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockParams,
    h: Var,
    mask: Option<&Rc<AttentionMask>>,
    heads: usize,
) -> Result<Var> {
    let masks = single_segment(tape, h, mask);
    segment_block(tape, store, block, h, &masks, heads)
}

/// [`transformer_block`] applied independently to each segment.
pub fn segment_block(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockParams,
    h: Var,
    masks: &Rc<Vec<AttentionMask>>,
    heads: usize,
) -> Result<Var> {
    let mix = segment_mix(tape, store, block, h, masks, heads)?;
    let (wo, bo) = (tape.param(store, block.wo), tape.param(store, block.bo));
    let attn = tape.linear(mix, wo, bo);
    let res = tape.add(h, attn);
    let (g1, b1) = (tape.param(store, block.ln1_gain), tape.param(store, block.ln1_bias));
    let x = tape.layer_norm_rows(res, g1, b1, LAYER_NORM_EPS);

    let (w1, c1) = (tape.param(store, block.ff1_w), tape.param(store, block.ff1_b));
    let (w2, c2) = (tape.param(store, block.ff2_w), tape.param(store, block.ff2_b));
    let hid = tape.linear(x, w1, c1);
    let hid = tape.relu(hid);
    let ff = tape.linear(hid, w2, c2);
    let res2 = tape.add(x, ff);
    let (g2, b2) = (tape.param(store, block.ln2_gain), tape.param(store, block.ln2_bias));
    Ok(tape.layer_norm_rows(res2, g2, b2, LAYER_NORM_EPS))
}

/// Shape-level entry point: runs one block over an `M×f` tensor.
pub fn masked_multi_head_attention(
    store: &ParamStore,
    block: &BlockParams,
    h: &super::Tensor,
    mask: &AttentionMask,
    heads: usize,
) -> Result<super::Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(h.clone());
    let mask = Rc::new(mask.clone());
    let y = transformer_block(&mut tape, store, block, x, Some(&mask), heads)?;
    tape.status()?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, heads: usize, seed: u64) -> (ParamStore, BlockParams) {
        let _ = heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = BlockParams::init(&mut store, "blk", dim, 2 * dim, &mut rng);
        (store, block)
    }

    fn random_tokens(m: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(m, f, (0..m * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shape_is_preserved() {
        let (store, block) = setup(32, 2, 1);
        let h = random_tokens(5, 32, 2);
        let out = masked_multi_head_attention(&store, &block, &h, &AttentionMask::full(5), 2).unwrap();
        assert_eq!(out.shape(), &[5, 32]);
    }

    #[test]
    fn identical_values_give_identical_mix() {
        let (mut store, block) = setup(8, 2, 3);
        // value projection ignores the input: every token maps to bv
        store.set(block.wv, Tensor::zeros(&[8, 8])).unwrap();
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        store.set(block.bv, Tensor::vector(v.clone())).unwrap();
        let mut tape = Tape::new();
        let h = tape.leaf(random_tokens(4, 8, 4));
        let mix = multi_head_mix(&mut tape, &store, &block, h, None, 2).unwrap();
        for r in 0..4 {
            for (a, b) in tape.value(mix).row(r).iter().zip(&v) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identity_mask_mixes_only_self() {
        let (mut store, block) = setup(4, 2, 5);
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        for w in [block.wq, block.wk, block.wv] {
            store.set(w, Tensor::matrix(4, 4, eye.clone()).unwrap()).unwrap();
        }
        store.set(block.ff1_w, Tensor::zeros(&[4, 8])).unwrap();
        store.set(block.ff2_w, Tensor::zeros(&[8, 4])).unwrap();
        let tokens = random_tokens(3, 4, 6);
        let mut tape = Tape::new();
        let h = tape.leaf(tokens.clone());
        let mask = Rc::new(AttentionMask::identity(3));
        let mix = multi_head_mix(&mut tape, &store, &block, h, Some(&mask), 2).unwrap();
        assert_eq!(tape.value(mix).data(), tokens.data());
    }

    #[test]
    fn all_permitted_mask_matches_no_mask_bitwise() {
        let (store, block) = setup(8, 2, 7);
        let tokens = random_tokens(6, 8, 8);
        let mut tape = Tape::new();
        let h = tape.leaf(tokens);
        let a = transformer_block(&mut tape, &store, &block, h, None, 2).unwrap();
        let mask = Rc::new(AttentionMask::full(6));
        let b = transformer_block(&mut tape, &store, &block, h, Some(&mask), 2).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn empty_query_row_is_an_error() {
        let (store, block) = setup(4, 2, 9);
        let h = random_tokens(2, 4, 10);
        let mask = AttentionMask::from_fn(2, 2, |q, k| q == 0 && k == 0);
        let err = masked_multi_head_attention(&store, &block, &h, &mask, 2).unwrap_err();
        assert!(matches!(err, UumError::AllMasked { row: 1 }));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let (store, block) = setup(6, 4, 11);
        let h = random_tokens(2, 6, 12);
        assert!(matches!(
            masked_multi_head_attention(&store, &block, &h, &AttentionMask::full(2), 4),
            Err(UumError::Config(_))
        ));
    }

    #[test]
    fn pad_rows_do_not_influence_real_rows() {
        let (store, block) = setup(8, 2, 13);
        let real = random_tokens(3, 8, 14);
        let mut padded = real.data().to_vec();
        padded.extend((0..16).map(|i| i as f64));
        let padded = Tensor::matrix(5, 8, padded).unwrap();
        let a = masked_multi_head_attention(&store, &block, &real, &AttentionMask::full(3), 2).unwrap();
        let mask = AttentionMask::from_padding(&[true, true, true, false, false]);
        let b = masked_multi_head_attention(&store, &block, &padded, &mask, 2).unwrap();
        assert_eq!(a.data(), &b.data()[..24]);
    }
}
