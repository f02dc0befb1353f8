//! Central finite-difference verification of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Result, UumError};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `point` against central differences.
/// Returns the maximum relative error over all coordinates.
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let zeros = vec![0.0; point.len()];
    let analytic = grads.get(x).unwrap_or(&zeros).to_vec();

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p);
        let y = f(&mut t, x)?;
        finite_scalar(&t, y)
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`gradient_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Checks gradients of a scalar loss w.r.t. every coordinate of every
/// parameter in `store` (or only `only`, when given).
pub fn gradient_check_params<F>(store: &ParamStore, f: F, eps: f64, only: Option<&[ParamId]>) -> Result<ParamCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?.param_grads(&tape, store);

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut scratch = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let y = f(&mut t, s)?;
        finite_scalar(&t, y)
    };

    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for id in ids {
        let n = store.get(id).len();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            scratch.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&scratch)?;
            scratch.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&scratch)?;
            scratch.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn finite_scalar(tape: &Tape, y: Var) -> Result<f64> {
    tape.status()?;
    let v = tape.value(y).item();
    if !v.is_finite() {
        return Err(UumError::NonFinite { op: "gradient_check", node: y.index() });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{AttentionMask, BlockParams, transformer_block};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = gradient_check(
            |t, x| {
                let sq = t.mul(x, x);
                Ok(t.sum(sq))
            },
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");

        let mut t = Tape::new();
        let v = t.leaf(x);
        let sq = t.mul(v, v);
        let s = t.sum(sq);
        assert_eq!(t.backward(s).unwrap().get(v).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_cross_entropy() {
        for seed in 0..3 {
            let logits = random(&[4, 5], seed);
            let err = gradient_check(
                |t, x| t.cross_entropy(x, &[0, 3, 2, 4], None),
                &logits,
                DEFAULT_FD_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn masked_cross_entropy() {
        let logits = random(&[2, 3], 9);
        let mask = [true, false, true, true, true, false];
        let err = gradient_check(|t, x| t.cross_entropy(x, &[0, 1], Some(&mask)), &logits, DEFAULT_FD_EPS).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// Every primitive op, composed into one scalar, for three seeds.
    #[test]
    fn every_primitive_op() {
        for seed in 0..3u64 {
            let x = random(&[3, 4], 100 + seed);
            let w = random(&[4, 4], 200 + seed);
            let b = random(&[4], 300 + seed);
            let g = random(&[4], 400 + seed);
            let mask = Rc::new(AttentionMask::from_padding(&[true, true, false]));
            let f = |t: &mut Tape, x: Var| -> Result<Var> {
                let wv = t.leaf(w.clone());
                let bv = t.leaf(b.clone());
                let gv = t.leaf(g.clone());
                let y = t.linear(x, wv, bv);
                let s = t.matmul_nt(y, x);
                let s = t.scale(s, 0.5);
                let p = t.softmax_rows(s, Some(&mask))?;
                let mixed = t.matmul(p, y);
                let ln = t.layer_norm_rows(mixed, gv, bv, 1e-5);
                let left = t.slice_cols(ln, 0, 2);
                let right = t.slice_cols(x, 2, 2);
                let cat = t.concat_cols(&[left, right]);
                let sel = t.select_rows(cat, &[2, 0, 0]);
                let tr = t.transpose(sel);
                let back = t.transpose(tr);
                let stacked = t.concat_rows(&[back, x]);
                let sc = t.scatter_rows(&[(stacked, vec![5, 0, 2, 1, 4, 3])], 7);
                let rl = t.relu(sc);
                let prod = t.mul(rl, sc);
                let diff = t.sub(prod, sc);
                let pair = t.pairwise_add(diff, x);
                let r = t.reshape(pair, &[7, 3, 4]);
                let ce_in = t.select_rows(r, &[0, 5, 11]);
                let ce = t.cross_entropy(ce_in, &[1, 2, 0], None)?;
                let mse_in = t.slice_cols(y, 1, 1);
                let mse = t.mse(mse_in, &[0.1, -0.2, 0.3]);
                let both = t.add(ce, mse);
                let total = t.sum(both);
                Ok(total)
            };
            let err = gradient_check(f, &x, DEFAULT_FD_EPS).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn transformer_block_params() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let block = BlockParams::init(&mut store, "b", 4, 8, &mut rng);
            let tokens = random(&[3, 4], 50 + seed);
            let readout = random(&[3, 4], 60 + seed);
            let mask = Rc::new(AttentionMask::full(3));
            let report = gradient_check_params(
                &store,
                |t, s| {
                    let h = t.leaf(tokens.clone());
                    let y = transformer_block(t, s, &block, h, Some(&mask), 2)?;
                    // random readout: sum(y^2) would be nearly constant after layer norm
                    let r = t.leaf(readout.clone());
                    let y = t.mul(y, r);
                    let y = t.mul(y, y);
                    Ok(t.sum(y))
                },
                DEFAULT_FD_EPS,
                None,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn segmented_attention_and_pooling() {
        for seed in 0..3u64 {
            let x = random(&[8, 4], 500 + seed);
            let wk = random(&[4, 4], 600 + seed);
            let wv = random(&[4, 4], 700 + seed);
            let masks = Rc::new(vec![
                AttentionMask::from_padding(&[true, true, true, false]),
                AttentionMask::from_fn(4, 4, |q, k| k <= q),
            ]);
            let pool_mask = Rc::new(AttentionMask::from_fn(2, 4, |s, j| s == 1 || j < 3));
            let f = |t: &mut Tape, x: Var| -> Result<Var> {
                let wk = t.leaf(wk.clone());
                let wv = t.leaf(wv.clone());
                let k = t.matmul(x, wk);
                let v = t.matmul(x, wv);
                let y = t.segment_attention(x, k, v, &masks, 2)?;
                let scores = t.slice_cols(y, 0, 1);
                let scores = t.reshape(scores, &[2, 4]);
                let w = t.softmax_rows(scores, Some(&pool_mask))?;
                let pooled = t.segment_weighted_sum(w, y);
                let sq = t.mul(pooled, pooled);
                Ok(t.sum(sq))
            };
            let err = gradient_check(f, &x, DEFAULT_FD_EPS).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn segment_attention_matches_per_segment_softmax() {
        let x = random(&[6, 4], 800);
        let masks = Rc::new(vec![AttentionMask::full(3), AttentionMask::from_padding(&[true, false, true])]);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let fused = t.segment_attention(xv, xv, xv, &masks, 1).unwrap();
        for (s, mask) in masks.iter().enumerate() {
            let rows: Vec<usize> = (s * 3..s * 3 + 3).collect();
            let seg = t.select_rows(xv, &rows);
            let logits = t.matmul_nt(seg, seg);
            let logits = t.scale(logits, 0.5);
            let m = Rc::new(mask.clone());
            let p = t.softmax_rows(logits, Some(&m)).unwrap();
            let o = t.matmul(p, seg);
            for (i, &r) in rows.iter().enumerate() {
                for (a, b) in t.value(fused).row(r).iter().zip(t.value(o).row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::vector(vec![1.0]);
        let r = gradient_check(|t, x| Ok(t.scale(x, f64::INFINITY)), &x, DEFAULT_FD_EPS);
        assert!(r.is_err());
    }
}
