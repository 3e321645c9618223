//! Adam with L2 gradient augmentation, and plateau learning-rate decay.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers per parameter, the step counter and the
/// current learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            config,
            lr: config.lr,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update. Parameters in `l2_set` get `2 * l2 * theta`
    /// added to their gradient first. Parameters without a gradient entry are
    /// treated as having a zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f64>)],
        l2_set: &BTreeSet<ParamId>,
        l2: f64,
    ) -> Result<()> {
        for (id, g) in grads {
            if g.len() != store.value(*id).len() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: store.value(*id).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite gradient for {} at element {pos}",
                    store.name(*id)
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let theta = store.value_mut(*id).data_mut();
            let decay = if l2_set.contains(id) { 2.0 * l2 } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for k in 0..theta.len() {
                let gk = g[k] + decay * theta[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Multiply the learning rate by `factor` (floored at `min_lr`) once the
/// monitored loss has not improved for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("lr factor must lie in (0, 1), got {factor}")));
        }
        if patience == 0 {
            return Err(Error::Config("lr patience must be at least 1".into()));
        }
        Ok(PlateauScheduler {
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
        })
    }

    /// Feed one epoch's monitored loss; returns the (possibly reduced) rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience && lr > self.min_lr {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Replay a loss history through a fresh scheduler starting at `lr`.
pub fn reduce_lr_on_plateau(history: &[f64], lr: f64, factor: f64, patience: usize, min_lr: f64) -> Result<f64> {
    let mut sched = PlateauScheduler::new(factor, patience, min_lr)?;
    Ok(history.iter().fold(lr, |lr, &loss| sched.observe(loss, lr)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store(values: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_param("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let (mut s, id) = store(&[0.5, -1.5]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[(id, vec![0.0, 0.0])], &BTreeSet::new(), 0.0).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, -1.5]);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = store(&[1.0, 2.0, -3.0]);
        let g = vec![0.3, -2.0, 1e-3];
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, &[(id, g.clone())], &BTreeSet::new(), 0.0).unwrap();
        // m_hat = g, v_hat = g^2 after one step.
        for ((theta, g0), start) in s.value(id).data().iter().zip(&g).zip([1.0, 2.0, -3.0]) {
            let want = start - 1e-4 * g0 / (g0.abs() + 1e-8);
            assert!((theta - want).abs() < 1e-10, "{theta} vs {want}");
        }
    }

    #[test]
    fn l2_augments_gradient() {
        let (mut s, id) = store(&[2.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &s);
        let set: BTreeSet<_> = [id].into();
        adam.step(&mut s, &[(id, vec![0.0])], &set, 0.001).unwrap();
        // gradient 2*0.001*2 > 0, so the first step moves by ~lr downward.
        assert!((s.value(id).data()[0] - (2.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn rejects_nan_gradient() {
        let (mut s, id) = store(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        assert!(adam.step(&mut s, &[(id, vec![f64::NAN])], &BTreeSet::new(), 0.0).is_err());
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn identical_gradient_streams_agree() {
        let (mut a, ia) = store(&[0.1, 0.2]);
        let (mut b, ib) = store(&[0.1, 0.2]);
        let mut oa = Adam::new(AdamConfig::default(), &a);
        let mut ob = Adam::new(AdamConfig::default(), &b);
        for k in 0..20 {
            let g = vec![(k as f64).sin(), (k as f64 * 0.7).cos()];
            oa.step(&mut a, &[(ia, g.clone())], &BTreeSet::new(), 0.0).unwrap();
            ob.step(&mut b, &[(ib, g)], &BTreeSet::new(), 0.0).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn plateau_examples() {
        let improving = [1.0, 0.9, 0.8, 0.7, 0.6];
        assert_eq!(reduce_lr_on_plateau(&improving, 1e-4, 0.2, 3, 1e-5).unwrap(), 1e-4);
        let stagnant = [1.0, 1.0, 1.0, 1.0];
        let lr = reduce_lr_on_plateau(&stagnant, 1e-4, 0.2, 3, 1e-5).unwrap();
        assert!((lr - 2e-5).abs() < 1e-18);
        let long = [1.0; 40];
        assert_eq!(reduce_lr_on_plateau(&long, 1e-4, 0.2, 3, 1e-5).unwrap(), 1e-5);
        assert!(PlateauScheduler::new(1.5, 3, 1e-5).is_err());
    }
}
