//! SGD with heavy-ball momentum and the warmup + cosine learning-rate law.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor, Variable};

/// One SGD step with coupled L2 decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
///
/// Parameters that do not require gradients are skipped.
pub fn sgd_step<T: Scalar>(
    params: &mut [Variable<T>],
    velocity: &mut [Tensor<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if !(lr >= T::zero()) {
        return Err(Error::param("lr", format!("must be non-negative, got {lr}")));
    }
    if params.len() != velocity.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[velocity.len()]));
    }
    for (p, v) in params.iter().zip(velocity.iter()) {
        if p.value.shape() != v.shape() || p.grad.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", p.value.shape(), v.shape()));
        }
    }
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        if !p.requires_grad {
            continue;
        }
        let (theta, grad) = (p.value.data_mut(), p.grad.data());
        for ((t, &g), vel) in theta.iter_mut().zip(grad).zip(v.data_mut()) {
            *vel = momentum * *vel + (g + weight_decay * *t);
            *t -= lr * *vel;
        }
    }
    Ok(())
}

/// Step-indexed learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_epochs: u64, epochs: u64, steps_per_epoch: u64) -> Self {
        Schedule {
            base_lr,
            warmup_steps: warmup_epochs.min(epochs) * steps_per_epoch,
            total_steps: epochs * steps_per_epoch,
        }
    }

    /// Linear ramp 0 → base over the warmup steps, then half-cosine base → 0
    /// reaching zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}
