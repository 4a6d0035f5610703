//! ADAM with bias correction and a linearly decaying learning rate.

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate for step `t` (1-based), interpolated linearly so that
    /// step 1 uses `initial` and step `total_steps` uses `final_lr`.
    pub fn at(&self, t: u64) -> f64 {
        if self.total_steps <= 1 {
            return if t >= self.total_steps { self.final_lr } else { self.initial };
        }
        if t >= self.total_steps {
            return self.final_lr;
        }
        let frac = t.saturating_sub(1) as f64 / (self.total_steps - 1) as f64;
        self.initial + (self.final_lr - self.initial) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub schedule: LrSchedule,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>], schedule: LrSchedule, config: AdamConfig) -> Self {
        Self {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            schedule,
            config,
        }
    }

    /// Learning rate the next call to [`AdamState::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.at(self.step_count + 1)
    }

    /// One update. Returns the learning rate that was applied.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Optimizer(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::Optimizer(format!(
                    "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.first_moment[i].shape()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let lr = self.schedule.at(t);
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(t.min(i32::MAX as u64) as i32);
        let step_size = T::cst(lr / bc1);
        let inv_bc2_sqrt = T::cst(1.0 / bc2.sqrt());
        let (b1, b2, e) = (T::cst(beta1), T::cst(beta2), T::cst(eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let denom = vv.sqrt() * inv_bc2_sqrt + e;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(lr)
    }
}
