//! Linear warm-up followed by cosine annealing down to a tenth of the peak.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ModelError;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_grad_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Decoupled weight decay; off unless an ablation sets it.
    #[serde(default)]
    pub weight_decay: f64,
}

/// Peak-to-floor learning-rate ratio of the cosine phase.
pub const LR_DECAY_FACTOR: f64 = 10.0;

impl TrainSchedule {
    /// Warm-up then cosine decay from `max_lr` to `max_lr / 10`.
    pub fn new(total_steps: usize, warmup_steps: usize, max_lr: f64, batch_size: usize) -> Self {
        Self {
            total_steps,
            warmup_steps,
            max_lr,
            min_lr: max_lr / LR_DECAY_FACTOR,
            batch_size,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            grad_clip: default_grad_clip(),
            weight_decay: 0.0,
        }
    }

    /// Seed pretraining: 20k steps with 1k warm-up at the given peak rate.
    pub fn seed_pretraining(max_lr: f64, batch_size: usize) -> Self {
        Self::new(20_000, 1_000, max_lr, batch_size)
    }

    /// Domain training continues from a pretrained seed: the peak rate is the
    /// seed schedule's final rate, with 50 warm-up steps out of 600.
    pub fn domain_training(seed: &TrainSchedule) -> Self {
        Self {
            total_steps: 600,
            warmup_steps: 50,
            max_lr: seed.min_lr,
            min_lr: seed.min_lr / LR_DECAY_FACTOR,
            ..seed.clone()
        }
    }

    /// Same shape with a different step count; warm-up is kept unless it
    /// would not fit, in which case it shrinks proportionally.
    pub fn with_total_steps(&self, total_steps: usize) -> Self {
        let warmup_steps = if self.warmup_steps < total_steps || total_steps == 0 {
            self.warmup_steps.min(total_steps)
        } else {
            (self.warmup_steps * total_steps / self.total_steps.max(1)).min(total_steps - 1)
        };
        Self {
            total_steps,
            warmup_steps,
            ..self.clone()
        }
    }

    /// `total_steps == 0` (with no warm-up) is allowed and means "no updates".
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidSchedule(m));
        let idle = self.total_steps == 0 && self.warmup_steps == 0;
        if !idle && self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.max_lr && self.max_lr.is_finite()) {
            return fail(format!("need 0 < min_lr {} <= max_lr {}", self.min_lr, self.max_lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and eps be positive".into());
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return fail("grad_clip and weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate after `step` optimizer updates.
pub fn lr_at(step: usize, schedule: &TrainSchedule) -> Result<f64, ModelError> {
    if step > schedule.total_steps {
        return Err(ModelError::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    let (max, min) = (schedule.max_lr, schedule.min_lr);
    if step < schedule.warmup_steps {
        return Ok(max * step as f64 / schedule.warmup_steps as f64);
    }
    let span = schedule.total_steps - schedule.warmup_steps;
    if span == 0 {
        return Ok(max);
    }
    let progress = (step - schedule.warmup_steps) as f64 / span as f64;
    Ok(min + 0.5 * (max - min) * (1.0 + (PI * progress).cos()))
}
