use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamGrads, ParamStore, Tensor};

/// Exponential per-epoch schedule: `initial * decay^epoch`.
pub fn lr_decay(initial: f64, decay: f64, epoch: u32) -> f64 {
    initial * decay.powi(epoch as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| t.map(|_| 0.0))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update at learning rate `lr`.
    ///
    /// Parameters without a gradient are treated as having a zero gradient.
    /// Frozen rows are never modified. Any non-finite gradient aborts the
    /// update before a single parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<(), NumericsError> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "adam: {} gradients / {} moments for {} parameters",
                grads.len(),
                self.first.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(NumericsError::shape("adam", store.get(id).shape(), g.shape()));
                }
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (rows, cols) = (store.get(id).rows(), store.get(id).cols());
            let mut frozen = vec![false; rows];
            for &r in store.frozen_rows(id) {
                frozen[r] = true;
            }
            let g = grads.get(id);
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                if frozen[k / cols] {
                    continue;
                }
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, crate::numerics::ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(value));
        (store, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = single(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::new(&store);
        grads.accumulate(id, &Tensor::scalar(1.0));
        adam.step(&mut store, &grads, 0.001).unwrap();
        let x = store.get(id).item();
        assert!((x + 0.001).abs() < 1e-10, "{x}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = single(0.7);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::new(&store);
        grads.accumulate(id, &Tensor::scalar(0.0));
        for _ in 0..5 {
            adam.step(&mut store, &grads, 0.001).unwrap();
        }
        assert_eq!(store.get(id).item(), 0.7);
    }

    #[test]
    fn nan_gradient_is_rejected_with_name() {
        let (mut store, id) = single(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut grads = ParamGrads::new(&store);
        grads.accumulate(id, &Tensor::scalar(f64::NAN));
        let err = adam.step(&mut store, &grads, 0.001).unwrap_err();
        assert_eq!(err, NumericsError::NonFiniteGradient("x".into()));
        assert_eq!(store.get(id).item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn quadratic_descent_shrinks_every_window() {
        // Reference scalar recurrence for f(x) = x^2, computed without the store.
        let (lr, b1, b2, eps) = (0.001, 0.9, 0.999, 1e-8);
        let (mut x_ref, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let (mut store, id) = single(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut trace = vec![1.0];
        for t in 1..=100 {
            let g = 2.0 * x_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x_ref -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);

            let mut grads = ParamGrads::new(&store);
            grads.accumulate(id, &Tensor::scalar(2.0 * store.get(id).item()));
            adam.step(&mut store, &grads, lr).unwrap();
            assert_eq!(store.get(id).item(), x_ref);
            trace.push(x_ref.abs());
        }
        for w in trace.chunks(10).collect::<Vec<_>>().windows(2) {
            assert!(w[1][0] < w[0][0], "{:?}", w);
        }
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(lr_decay(0.001, 0.97, 0), 0.001);
        assert!((lr_decay(0.001, 0.97, 1) - 0.00097).abs() < 1e-18);
        assert!((lr_decay(0.001, 0.97, 20) - 0.001 * 0.97f64.powf(20.0)).abs() < 1e-18);
    }
}
