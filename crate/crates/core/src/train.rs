//! Deterministic mini-batch training with ADAM and a linear learning-rate
//! decay.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment7, resize, Sample};
use crate::error::{Error, Result};
use crate::network::{loss_and_grads, NetworkConfig};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::params::ParamSet;
use crate::scalar::order_invariant_sum;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Expand the training set with the seven dihedral variants of each sample.
    pub augment: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            lr_initial: 5e-5,
            lr_final: 5e-7,
            seed: 0,
            log_every: 100,
            augment: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be positive".into()));
        }
        for (name, v) in [("lr_initial", self.lr_initial), ("lr_final", self.lr_final)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr_initial,
            final_lr: self.lr_final,
            total_steps: self.iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub iter: u64,
    /// Mean loss of the batch at this iteration, before its update.
    pub loss: f64,
    pub lr: f64,
}

/// Resize to the network input and convert to the training layout.
pub fn prepare(samples: &[Sample], cfg: &NetworkConfig, augment: bool) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let (h, w) = cfg.input_size;
    let mut out = Vec::new();
    for s in samples {
        let variants = if augment { augment7(s)? } else { alloc::vec![s.clone()] };
        for v in variants {
            let v = resize(&v, h, w)?;
            out.push((v.image, v.mask));
        }
    }
    Ok(out)
}

fn batch_loss(
    params: &ParamSet<f32>,
    cfg: &NetworkConfig,
    data: &[(Tensor<f32>, Tensor<f32>)],
    batch: &[usize],
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut losses = Vec::with_capacity(batch.len());
    let mut total: Option<Vec<Tensor<f32>>> = None;
    for &i in batch {
        let (image, mask) = &data[i];
        let (loss, grads) = loss_and_grads(params, cfg, image, mask)?;
        losses.push(loss as f64);
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let n = batch.len() as f32;
    let mut grads = total.unwrap_or_default();
    for g in &mut grads {
        for x in g.data_mut() {
            *x /= n;
        }
    }
    Ok((order_invariant_sum(&mut losses) / batch.len() as f64, grads))
}

/// Train `params` in place. `log` receives a line every `log_every`
/// iterations and a final line at `iterations` with the loss of the trained
/// parameters on the next batch.
pub fn train(
    params: &mut ParamSet<f32>,
    cfg: &NetworkConfig,
    samples: &[Sample],
    tc: &TrainConfig,
    mut log: impl FnMut(LogLine),
) -> Result<()> {
    cfg.validate()?;
    tc.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let data = prepare(samples, cfg, tc.augment)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut next_batch = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(rng);
                order.reverse();
            }
            batch.push(order.pop().unwrap_or(0));
        }
        batch
    };
    let schedule = tc.schedule();
    let mut adam = AdamState::new(params.tensors(), schedule, tc.adam);
    for t in 0..tc.iterations {
        let batch = next_batch(&mut rng);
        let (loss, grads) = batch_loss(params, cfg, &data, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { op: "train" });
        }
        let lr = adam.step(params.tensors_mut(), &grads)?;
        if t % tc.log_every == 0 {
            log(LogLine { iter: t, loss, lr });
        }
    }
    if tc.iterations > 0 {
        let batch = next_batch(&mut rng);
        let (loss, _) = batch_loss(params, cfg, &data, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "train" });
        }
        log(LogLine {
            iter: tc.iterations,
            loss,
            lr: schedule.at(tc.iterations),
        });
    }
    Ok(())
}
