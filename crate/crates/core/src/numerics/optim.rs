//! AdamW: Adam with weight decay applied directly to the parameter value.

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates, one pair per param in store order.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Per-param multiplier on the learning rate (1 by default).
    pub lr_scale: Vec<f64>,
}

impl AdamWState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        AdamWState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            lr_scale: vec![1.0; store.len()],
        }
    }

    /// One update of every trainable param from its current grad.
    ///
    /// The decay term multiplies the value by `1 - lr·wd` before the
    /// bias-corrected moment step, independent of the gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let lr = lr * self.lr_scale[id.index()];
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let g = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] *= 1.0 - lr * weight_decay;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value), trainable);
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn first_step_matches_hand_expansion() {
        let (theta, g, lr) = (0.7, 0.3, 2e-4);
        let cfg = AdamWConfig::default();
        let mut store = store_with(theta, g, true);
        let mut opt = AdamWState::new(&store, cfg);
        opt.step(&mut store, lr);

        // t = 1: m = (1-β1)g, v = (1-β2)g², bias correction restores g and g².
        let m_hat = ((1.0 - cfg.beta1) * g) / (1.0 - cfg.beta1);
        let v_hat = ((1.0 - cfg.beta2) * g * g) / (1.0 - cfg.beta2);
        let expected =
            theta * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        let got = store.value(crate::numerics::ParamId(0)).data()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        // Sign-like first step of size ≈ lr.
        assert!(((theta * (1.0 - lr * cfg.weight_decay) - got) - lr).abs() < 1e-10);
    }

    #[test]
    fn zero_grad_and_zero_decay_leave_param_unchanged() {
        let mut store = store_with(1.25, 0.0, true);
        let mut opt = AdamWState::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..5 {
            opt.step(&mut store, 1e-2);
        }
        assert_eq!(store.value(crate::numerics::ParamId(0)).data()[0], 1.25);
    }

    #[test]
    fn frozen_param_is_not_updated() {
        let mut store = store_with(-3.0, 10.0, false);
        let mut opt = AdamWState::new(&store, AdamWConfig::default());
        opt.step(&mut store, 1.0);
        assert_eq!(store.value(crate::numerics::ParamId(0)).data()[0], -3.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut store = store_with(0.5, -0.2, true);
            let mut opt = AdamWState::new(&store, AdamWConfig::default());
            for _ in 0..10 {
                opt.step(&mut store, 1e-3);
            }
            store.value(crate::numerics::ParamId(0)).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
