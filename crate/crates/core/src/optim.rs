//! First-order optimizers over a [`ParamStore`].

use crate::config::{OptimConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam, or SGD with momentum reusing the first-moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for ((id, g), (m, v)) in params.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            match c.kind {
                OptimizerKind::Adam => {
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..p.len() {
                        m[i] = c.momentum * m[i] + g.data()[i];
                        p[i] -= c.lr * m[i];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Optimizer::new(OptimConfig::default(), &store);
        let g = vec![Tensor::new(&[2], vec![3.0, -0.5]).unwrap()];
        opt.update(&mut store, &g).unwrap();
        let w = store.get(store.find("w").unwrap()).data();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1], vec![4.0]).unwrap());
        let cfg = OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = Optimizer::new(cfg, &store);
        for _ in 0..50 {
            let w = store.get(store.find("w").unwrap()).data()[0];
            opt.update(&mut store, &[Tensor::new(&[1], vec![2.0 * w]).unwrap()]).unwrap();
        }
        assert!(store.get(store.find("w").unwrap()).data()[0].abs() < 1e-4);
    }

    #[test]
    fn gradient_count_must_match() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[1]));
        let mut opt = Optimizer::new(OptimConfig::default(), &store);
        assert!(opt.update(&mut store, &[]).is_err());
    }
}
