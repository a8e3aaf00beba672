use std::collections::BTreeSet;

use thiserror::Error;

use super::checkpoint::{ExpertCheckpoint, LineageEntry};
use super::model::loss_and_grad;
use super::params::ModelParams;
use super::schedule::{lr_at, TrainSchedule};
use super::ModelError;
use crate::corpus::Batch;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at step {step}; last good checkpoint is step {}", last_good.step())]
    NonFiniteLoss {
        step: usize,
        last_good: Box<ExpertCheckpoint>,
    },
    #[error("checkpoint step {requested} is beyond the schedule's {total} steps")]
    CheckpointBeyondSchedule { requested: usize, total: usize },
    #[error("batch stream ended after {0} steps")]
    DataExhausted(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Adam with bias correction, global-norm clipping and optional decoupled
/// weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &ModelParams<f32>,
        lr: f64,
        schedule: &TrainSchedule,
    ) {
        self.t += 1;
        let norm = grads.data.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
        let clip = if schedule.grad_clip > 0.0 && norm > schedule.grad_clip {
            (schedule.grad_clip / norm) as f32
        } else {
            1.0
        };
        let (b1, b2) = (schedule.beta1 as f32, schedule.beta2 as f32);
        let bc1 = 1.0 - schedule.beta1.powi(self.t);
        let bc2 = 1.0 - schedule.beta2.powi(self.t);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = schedule.adam_eps as f32;
        let decay = (lr * schedule.weight_decay) as f32;
        for (((p, &g), m), v) in params
            .data
            .iter_mut()
            .zip(&grads.data)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = g * clip;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            if decay != 0.0 {
                *p -= decay * *p;
            }
            *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// One checkpoint per requested step plus the final step, ascending.
    pub checkpoints: Vec<ExpertCheckpoint>,
    /// Training loss of every optimizer step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn at_step(&self, step: usize) -> Option<&ExpertCheckpoint> {
        self.checkpoints.iter().find(|c| c.step() == step)
    }

    pub fn last(&self) -> &ExpertCheckpoint {
        self.checkpoints.last().expect("final checkpoint is always emitted")
    }
}

/// Runs `schedule.total_steps` Adam updates from `start`, using `lr_at(k)` for
/// the k-th update. Emitted checkpoints carry the start lineage plus `entry`.
pub fn train<I>(
    start: &ExpertCheckpoint,
    data: I,
    schedule: &TrainSchedule,
    checkpoint_steps: &BTreeSet<usize>,
    entry: Option<LineageEntry>,
) -> Result<TrainOutcome, TrainError>
where
    I: IntoIterator<Item = Batch>,
{
    schedule.validate()?;
    if let Some(&max) = checkpoint_steps.last() {
        if max > schedule.total_steps {
            return Err(TrainError::CheckpointBeyondSchedule {
                requested: max,
                total: schedule.total_steps,
            });
        }
    }
    let config = start.config().clone();
    let mut lineage = start.lineage().to_vec();
    lineage.extend(entry);
    let seal = |params: &ModelParams<f32>, step: usize| {
        ExpertCheckpoint::new(config.clone(), params.clone(), step, lineage.clone())
    };

    let mut params = start.params().clone();
    let mut adam = Adam::new(params.len());
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(schedule.total_steps);
    if checkpoint_steps.contains(&0) && schedule.total_steps > 0 {
        checkpoints.push(seal(&params, 0));
    }
    let mut data = data.into_iter();
    for step in 1..=schedule.total_steps {
        let batch = data.next().ok_or(TrainError::DataExhausted(step - 1))?;
        let diverged = |params: &ModelParams<f32>| TrainError::NonFiniteLoss {
            step,
            last_good: Box::new(seal(params, step - 1)),
        };
        let (loss, grads) = match loss_and_grad(&config, &params, &batch) {
            Ok(v) => v,
            Err(ModelError::NonFiniteLoss { .. }) => return Err(diverged(&params)),
            Err(e) => return Err(e.into()),
        };
        if !grads.all_finite() {
            return Err(diverged(&params));
        }
        let before = params.clone();
        adam.step(&mut params, &grads, lr_at(step, schedule)?, schedule);
        if !params.all_finite() {
            return Err(diverged(&before));
        }
        losses.push(loss);
        if checkpoint_steps.contains(&step) && step != schedule.total_steps {
            checkpoints.push(seal(&params, step));
        }
    }
    checkpoints.push(seal(&params, schedule.total_steps));
    Ok(TrainOutcome {
        checkpoints,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{batch_iterator, tokenize, TokenId};
    use crate::tinylm::config::ExpertConfig;
    use crate::tinylm::params::init_model;

    fn seed_ckpt(config: &ExpertConfig, seed: u64) -> ExpertCheckpoint {
        ExpertCheckpoint::new(config.clone(), init_model(config, seed), 0, vec![])
    }

    fn entry() -> LineageEntry {
        LineageEntry {
            iteration: 1,
            domain: "d".into(),
            parent: "p".into(),
        }
    }

    #[test]
    fn emits_requested_and_final_checkpoints() {
        let c = ExpertConfig::new(8, 16, 2, 1).with_seq_len(8);
        let start = seed_ckpt(&c, 0);
        let tokens: Vec<TokenId> = tokenize(&b"abcdefgh".repeat(20));
        let data = batch_iterator(&tokens, 8, 2, 0).unwrap();
        let sched = TrainSchedule::new(12, 2, 1e-3, 2);
        let out = train(&start, data, &sched, &BTreeSet::from([8, 12]), Some(entry())).unwrap();
        let steps: Vec<usize> = out.checkpoints.iter().map(|c| c.step()).collect();
        assert_eq!(steps, vec![8, 12]);
        assert_eq!(out.losses.len(), 12);
        assert_eq!(out.last().lineage(), &[entry()]);
        assert!(matches!(
            train(&start, std::iter::empty(), &sched, &BTreeSet::from([13]), None),
            Err(TrainError::CheckpointBeyondSchedule { .. })
        ));
    }

    #[test]
    fn zero_steps_is_identity() {
        let c = ExpertConfig::new(8, 16, 2, 1).with_seq_len(8);
        let start = seed_ckpt(&c, 0);
        let sched = TrainSchedule::new(0, 0, 1e-3, 2);
        let out = train(&start, std::iter::empty(), &sched, &BTreeSet::new(), None).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.last().params(), start.params());
        assert_eq!(out.last().id(), start.id());
    }

    #[test]
    fn training_is_deterministic() {
        let c = ExpertConfig::new(8, 16, 2, 1).with_seq_len(8);
        let tokens: Vec<TokenId> = tokenize(&b"the cat sat on the mat. ".repeat(10));
        let run = || {
            let data = batch_iterator(&tokens, 8, 2, 5).unwrap();
            let sched = TrainSchedule::new(10, 2, 1e-2, 2);
            train(&seed_ckpt(&c, 1), data, &sched, &BTreeSet::new(), None).unwrap()
        };
        assert_eq!(run().last().id(), run().last().id());
    }

    #[test]
    fn divergence_keeps_last_good() {
        let c = ExpertConfig::new(8, 16, 2, 1).with_seq_len(8);
        let mut params = init_model(&c, 0);
        params.data[3] = f32::NAN;
        let start = ExpertCheckpoint::new(c, params, 0, vec![]);
        let tokens: Vec<TokenId> = (0..64).collect();
        let data = batch_iterator(&tokens, 8, 2, 0).unwrap();
        let sched = TrainSchedule::new(5, 1, 1e-3, 2);
        match train(&start, data, &sched, &BTreeSet::new(), None) {
            Err(TrainError::NonFiniteLoss { step, last_good }) => {
                assert_eq!(step, 1);
                assert_eq!(last_good.step(), 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn overfits_a_repeating_corpus() {
        // ~5k parameters, 200 tokens of a short repeating phrase.
        let c = ExpertConfig::new(12, 24, 2, 1).with_seq_len(16);
        assert!(c.param_count() < 6_000);
        let text: Vec<u8> = b"abcab cabbage. ".iter().copied().cycle().take(200).collect();
        let tokens = tokenize(&text);
        let data = batch_iterator(&tokens, 16, 4, 3).unwrap();
        let sched = TrainSchedule::new(200, 10, 1e-2, 4);
        let out = train(&seed_ckpt(&c, 2), data, &sched, &BTreeSet::new(), None).unwrap();
        let first = out.losses[0];
        let last: f64 = out.losses[190..].iter().sum::<f64>() / 10.0;
        assert!(last <= 0.5 * first, "loss {first} -> {last}");
    }
}
