//! SGD with momentum and the learning-rate schedules used by the trainer.
//!
//! The update is `v <- mu*v + g; theta <- theta - lr*v`, i.e. the velocity is
//! not pre-scaled by the learning rate. Unrolled, the velocity after T steps
//! is `sum_i mu^(T-i) g_i`, which is what the oracle tests assert.

use crate::error::{Error, Result};

/// Per-parameter velocity buffers plus the momentum decay.
///
/// One buffer per parameter tensor, in the same order the trainer hands
/// parameters in. Single-owner mutable: one training loop drives it.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    step_count: u64,
}

impl OptimizerState {
    /// `sizes` gives the flat length of each parameter tensor.
    pub fn new(sizes: &[usize], momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        Ok(OptimizerState {
            velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            momentum,
            step_count: 0,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// One update over all parameter tensors. Non-finite gradients are an
    /// error, never skipped: a silent skip would corrupt the velocity history.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd_step tensor count",
                self.velocity.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (idx, ((p, g), v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.velocity.iter_mut())
            .enumerate()
        {
            if p.len() != v.len() || g.len() != v.len() {
                return Err(Error::shape("sgd_step tensor", v.len(), format!("{}/{}", p.len(), g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {idx}")));
            }
            for i in 0..v.len() {
                v[i] = self.momentum * v[i] + g[i];
                p[i] -= lr * v[i];
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// Half-cosine decay from base_lr to exactly 0 at total_epochs.
    Cosine,
    /// Multiply by `gamma` at each milestone epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
    Constant,
}

/// Learning-rate schedule with an optional linear warm-up phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    /// lr at epoch 0 is `warmup_start_factor * base_lr` when warming up.
    pub warmup_start_factor: f64,
}

impl LrSchedule {
    pub fn cosine(base_lr: f64, total_epochs: usize) -> Self {
        LrSchedule {
            kind: ScheduleKind::Cosine,
            base_lr,
            total_epochs,
            warmup_epochs: 0,
            warmup_start_factor: 1.0,
        }
    }

    pub fn constant(base_lr: f64, total_epochs: usize) -> Self {
        LrSchedule {
            kind: ScheduleKind::Constant,
            base_lr,
            total_epochs,
            warmup_epochs: 0,
            warmup_start_factor: 1.0,
        }
    }

    pub fn with_warmup(mut self, warmup_epochs: usize, start_factor: f64) -> Self {
        self.warmup_epochs = warmup_epochs;
        self.warmup_start_factor = start_factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr < 0.0 || !self.base_lr.is_finite() {
            return Err(Error::InvalidConfig(format!("base_lr {} invalid", self.base_lr)));
        }
        if self.warmup_epochs >= self.total_epochs && self.total_epochs > 0 {
            return Err(Error::InvalidConfig(format!(
                "warmup_epochs {} must be < total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_start_factor) {
            return Err(Error::InvalidConfig(format!(
                "warmup_start_factor {} must be in [0,1]",
                self.warmup_start_factor
            )));
        }
        if let ScheduleKind::Step { gamma, .. } = &self.kind {
            if !(0.0..=1.0).contains(gamma) {
                return Err(Error::InvalidConfig(format!("step gamma {gamma} must be in [0,1]")));
            }
        }
        Ok(())
    }

    /// Learning rate for `epoch` in `0..=total_epochs`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::InvalidConfig(format!(
                "epoch {} out of range 0..={}",
                epoch, self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            let f = self.warmup_start_factor;
            let p = epoch as f64 / self.warmup_epochs as f64;
            return Ok(self.base_lr * (f + (1.0 - f) * p));
        }
        Ok(match &self.kind {
            ScheduleKind::Cosine => {
                let span = (self.total_epochs - self.warmup_epochs) as f64;
                let p = (epoch - self.warmup_epochs) as f64 / span;
                self.base_lr * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
            }
            ScheduleKind::Step { milestones, gamma } => {
                let hits = milestones.iter().filter(|&&m| m <= epoch).count();
                self.base_lr * gamma.powi(hits as i32)
            }
            ScheduleKind::Constant => self.base_lr,
        })
    }
}
