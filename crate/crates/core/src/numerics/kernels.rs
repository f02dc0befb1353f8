//! Slice-level kernels shared by the tape and by callers that do not need gradients.

use crate::error::{Result, UumError};

/// Softmax over the entries permitted by `mask` (all entries when `None`).
///
/// Masked entries are excluded from the normalizer and come out as exactly 0.
pub fn softmax(logits: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    if !softmax_into(logits, mask, &mut out) {
        return Err(UumError::AllMasked { row: 0 });
    }
    Ok(out)
}

/// Writes the masked softmax of `logits` into `out`. Returns `false` (and
/// leaves `out` zeroed) when no entry is permitted.
pub(crate) fn softmax_into(logits: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> bool {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &z) in logits.iter().enumerate() {
        if allowed(i) && z > max {
            max = z;
        }
    }
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return false;
    }
    let mut sum = 0.0;
    for (i, (&z, o)) in logits.iter().zip(out.iter_mut()).enumerate() {
        if allowed(i) {
            let e = (z - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

/// `log Σ exp(z)` over permitted entries, with max subtraction.
pub fn log_sum_exp(logits: &[f64], mask: Option<&[bool]>) -> Option<f64> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &z)| (z - max).exp())
        .sum();
    Some(max + sum.ln())
}

/// `gain ⊙ (x − mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_normalize(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    assert!(x.len() == gain.len() && x.len() == bias.len(), "layer_normalize length mismatch");
    let mut out = vec![0.0; x.len()];
    layer_normalize_into(x, gain, bias, eps, &mut out, None);
    out
}

/// Returns `1 / sqrt(var + eps)`; optionally stores the normalized input.
pub(crate) fn layer_normalize_into(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
    normalized: Option<&mut [f64]>,
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    match normalized {
        Some(xhat) => {
            for i in 0..x.len() {
                let h = (x[i] - mean) * inv_std;
                xhat[i] = h;
                out[i] = gain[i] * h + bias[i];
            }
        }
        None => {
            for i in 0..x.len() {
                out[i] = gain[i] * (x[i] - mean) * inv_std + bias[i];
            }
        }
    }
    inv_std
}

/// Neumaier-compensated sum, independent of accumulation grouping to ~1 ulp.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax(&[0.0, 0.0], None).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0], None).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(softmax(&[5.0, 9.0], Some(&[true, false])).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_is_an_error() {
        assert!(matches!(
            softmax(&[1.0, 2.0], Some(&[false, false])),
            Err(UumError::AllMasked { .. })
        ));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0], None).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
    }

    #[test]
    fn layer_norm_closed_forms() {
        assert_eq!(layer_normalize(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3], 1e-5), vec![0.0; 3]);
        let y = layer_normalize(&[2.0, 0.0], &[1.0; 2], &[0.0; 2], 1e-15);
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
        let y = layer_normalize(&[1.0, -1.0], &[2.0; 2], &[1.0; 2], 1e-15);
        assert!((y[0] - 3.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let z = [0.3, -1.2, 2.0];
        let naive = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&z, None).unwrap() - naive).abs() < 1e-14);
        assert_eq!(log_sum_exp(&z, Some(&[false; 3])), None);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_monotone(
            logits in prop::collection::vec(-30.0f64..30.0, 1..20),
            bump in 0.0f64..5.0,
            which in 0usize..20,
        ) {
            let p = softmax(&logits, None).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let i = which % logits.len();
            let mut raised = logits.clone();
            raised[i] += bump;
            let q = softmax(&raised, None).unwrap();
            prop_assert!(q[i] >= p[i]);
        }

        #[test]
        fn masked_softmax_zeroes_masked_entries(
            logits in prop::collection::vec(-10.0f64..10.0, 2..12),
            mask_bits in prop::collection::vec(any::<bool>(), 12),
        ) {
            let mut mask: Vec<bool> = mask_bits[..logits.len()].to_vec();
            mask[0] = true;
            let p = softmax(&logits, Some(&mask)).unwrap();
            for (pi, m) in p.iter().zip(&mask) {
                if *m { prop_assert!(*pi > 0.0) } else { prop_assert_eq!(*pi, 0.0) }
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn layer_norm_standardizes(x in prop::collection::vec(-50.0f64..50.0, 2..40)) {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assume!(var > 1e-2);
            let eps = 1e-12;
            let y = layer_normalize(&x, &vec![1.0; x.len()], &vec![0.0; x.len()], eps);
            let ym = y.iter().sum::<f64>() / n;
            let yv = y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n;
            prop_assert!(ym.abs() < 1e-9);
            // eps-corrected variance: var / (var + eps)
            prop_assert!((yv - var / (var + eps)).abs() < 1e-9);
        }
    }
}
