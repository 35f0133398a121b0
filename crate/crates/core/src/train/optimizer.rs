use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Per-parameter adaptive steps with bias-corrected moment estimates.
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            kind,
            lr,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in ids.into_iter().zip(grads) {
                    for (w, &gi) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.t as i32);
                let c2 = 1.0 - BETA2.powi(self.t as i32);
                for (i, (id, g)) in ids.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &gi)) in store.get_mut(id).data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * gi;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * gi * gi;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, store.values());
        opt.step(&mut store, &[Tensor::vector(vec![3.0, -0.01, 0.0])]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] - -1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn sgd_step() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, store.values());
        opt.step(&mut store, &[Tensor::vector(vec![2.0, -2.0])]);
        assert_eq!(store.get(id).data(), &[0.0, 3.0]);
    }
}
