//! SGD with momentum and weight decay, and the stepped learning-rate
//! schedule. Update rule per parameter: v ← μ·v + (g + λ·θ), θ ← θ − lr·v,
//! with the rate chosen by parameter group (head vs. feature transform).
//! Weight decay applies to every parameter, biases included.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub head: f32,
    pub features: f32,
}

/// Piecewise-constant decay: both base rates are multiplied by `gamma`
/// once per listed epoch boundary that has been reached.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub base: GroupRates,
    pub step_epochs: Vec<usize>,
    pub gamma: f32,
}

impl LrSchedule {
    pub fn rates_at(&self, epoch: usize) -> GroupRates {
        let steps = self.step_epochs.iter().filter(|&&e| epoch >= e).count() as i32;
        let factor = self.gamma.powi(steps);
        GroupRates {
            head: self.base.head * factor,
            features: self.base.features * factor,
        }
    }
}

pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f32, weight_decay: f32) -> Self {
        let velocity = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Replace the momentum buffers (checkpoint resume).
    pub fn restore_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len() {
            return Err(Error::Contract(format!(
                "velocity count {} does not match {} parameters",
                velocity.len(),
                self.velocity.len()
            )));
        }
        for (cur, new) in self.velocity.iter().zip(&velocity) {
            if cur.shape() != new.shape() {
                return Err(Error::shape("restore_velocity", cur.shape(), new.shape()));
            }
        }
        self.velocity = velocity;
        Ok(())
    }

    /// One update over every parameter from the gradients accumulated in
    /// the store.
    pub fn step(&mut self, store: &mut ParamStore, rates: GroupRates) {
        let mu = self.momentum;
        let wd = self.weight_decay;
        for (param, vel) in store.iter_mut().zip(self.velocity.iter_mut()) {
            let lr = match param.group {
                ParamGroup::Head => rates.head,
                ParamGroup::Features => rates.features,
            };
            let g = param.grad.data();
            let theta = param.value.data();
            let v = vel.data_mut();
            for i in 0..v.len() {
                v[i] = mu * v[i] + (g[i] + wd * theta[i]);
            }
            let theta = param.value.data_mut();
            for i in 0..theta.len() {
                theta[i] -= lr * v[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f32, grad: f32) -> (ParamStore, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Head, Tensor::scalar(value));
        *store.grad_mut(id) = Tensor::scalar(grad);
        (store, id)
    }

    #[test]
    fn plain_gradient_descent_without_momentum_or_decay() {
        let (mut store, id) = store_with(1.0, 0.5);
        let mut opt = Sgd::new(&store, 0.0, 0.0);
        opt.step(
            &mut store,
            GroupRates {
                head: 0.1,
                features: 0.0,
            },
        );
        assert!((store.value(id).data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_parameter() {
        let (mut store, id) = store_with(2.0, 0.0);
        let mut opt = Sgd::new(&store, 0.9, 0.0);
        opt.step(
            &mut store,
            GroupRates {
                head: 0.1,
                features: 0.1,
            },
        );
        assert_eq!(store.value(id).data()[0], 2.0);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let (mut store, id) = store_with(1.0, 0.0);
        let mu = 0.9f32;
        let wd = 1e-4f32;
        let lr = 0.05f32;
        let grads = [0.3f32, -0.2];
        let mut opt = Sgd::new(&store, mu, wd);

        // hand recurrence in f32
        let mut theta = 1.0f32;
        let mut v = 0.0f32;
        for &g in &grads {
            v = mu * v + (g + wd * theta);
            theta -= lr * v;
        }

        for &g in &grads {
            *store.grad_mut(id) = Tensor::scalar(g);
            opt.step(
                &mut store,
                GroupRates {
                    head: lr,
                    features: lr,
                },
            );
        }
        assert!(
            (store.value(id).data()[0] - theta).abs() < 1e-7,
            "{} vs {theta}",
            store.value(id).data()[0]
        );
    }

    #[test]
    fn per_group_rates_are_respected() {
        let mut store = ParamStore::new();
        let head = store.add("h", ParamGroup::Head, Tensor::scalar(1.0));
        let feat = store.add("f", ParamGroup::Features, Tensor::scalar(1.0));
        *store.grad_mut(head) = Tensor::scalar(1.0);
        *store.grad_mut(feat) = Tensor::scalar(1.0);
        let mut opt = Sgd::new(&store, 0.0, 0.0);
        opt.step(
            &mut store,
            GroupRates {
                head: 0.5,
                features: 0.05,
            },
        );
        assert!((store.value(head).data()[0] - 0.5).abs() < 1e-7);
        assert!((store.value(feat).data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn schedule_steps_at_listed_epochs() {
        let sched = LrSchedule {
            base: GroupRates {
                head: 0.5,
                features: 0.05,
            },
            step_epochs: vec![30, 40],
            gamma: 0.1,
        };
        let at = |e: usize| sched.rates_at(e);
        assert_eq!(at(0), GroupRates { head: 0.5, features: 0.05 });
        assert_eq!(at(29), GroupRates { head: 0.5, features: 0.05 });
        let r30 = at(30);
        assert!((r30.head - 0.05).abs() < 1e-7 && (r30.features - 0.005).abs() < 1e-7);
        let r40 = at(40);
        assert!((r40.head - 0.005).abs() < 1e-7 && (r40.features - 0.0005).abs() < 1e-7);
        let r49 = at(49);
        assert!((r49.head - 0.005).abs() < 1e-7);
    }

    #[test]
    fn zero_rate_leaves_parameters_bitwise() {
        let (mut store, id) = store_with(1.2345678, 0.77);
        let before = store.value(id).data()[0].to_bits();
        let mut opt = Sgd::new(&store, 0.9, 1e-4);
        for _ in 0..5 {
            opt.step(
                &mut store,
                GroupRates {
                    head: 0.0,
                    features: 0.0,
                },
            );
        }
        assert_eq!(store.value(id).data()[0].to_bits(), before);
    }
}
