use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the non-frozen parameters of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently stored on the params.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let i = id.index();
            let (r, cols) = g.dims();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(r, cols));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(r, cols));
            let vals = p.value.data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = &mut m.data_mut()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                vals[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_are_untouched_and_zero_lr_is_identity() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::filled(1, 2, 1.0), false).unwrap();
        let b = s.add("b", Tensor::filled(1, 2, 1.0), true).unwrap();
        s.zero_grads();
        s.accumulate_grad(a, &Tensor::filled(1, 2, 0.5));
        s.accumulate_grad(b, &Tensor::filled(1, 2, 0.5));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut s);
        assert!((s.value(a).data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(s.value(b).data(), &[1.0, 1.0]);

        let before = s.checksum();
        let mut zero = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        zero.step(&mut s);
        assert_eq!(before, s.checksum());
    }
}
