use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { step: 0, first: zeros(), second: zeros() }
    }
}

/// One bias-corrected Adam step. Parameters whose gradient is `None` are
/// left untouched, moments included.
pub fn adam_update(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        let Some(g) = &grads[id.index()] else { continue };
        let m = &mut state.first[id.index()];
        let v = &mut state.second[id.index()];
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values));
        s
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let mut store = store_with(vec![1.0, -2.0, 0.5]);
        let g = vec![0.3, -4.0, 1e-3];
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig { lr: 0.01, beta1: 0.7, beta2: 0.95, eps: 1e-8 };
        adam_update(&mut store, &[Some(Tensor::vector(g.clone()))], &mut state, &cfg);
        let before = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let expect = before[i] - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((store.get(crate::numerics::ParamId(0)).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = store_with(vec![1.0, 2.0]);
        let mut state = AdamState::new(&store);
        adam_update(&mut store, &[Some(Tensor::vector(vec![0.0, 0.0]))], &mut state, &AdamConfig::default());
        assert_eq!(store.get(crate::numerics::ParamId(0)).data(), &[1.0, 2.0]);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut store = store_with(vec![0.1, 0.2, 0.3]);
            let mut state = AdamState::new(&store);
            for k in 0..20 {
                let g = Tensor::vector(vec![(k as f64).sin(), (k as f64 * 0.3).cos(), 0.01 * k as f64]);
                adam_update(&mut store, &[Some(g)], &mut state, &AdamConfig::default());
            }
            store
        };
        assert_eq!(run(), run());
    }
}
