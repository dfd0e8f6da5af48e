//! Optimizer loop pieces shared by the extractor and ASR trainers.

use ctxasr_nn::{adam_step, AdamConfig, Gradients, NoamSchedule, OptimizerState, ParamStore, SeedTree};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && self.peak_lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("{what}: invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam with a warmup schedule and gradient clipping.
pub struct Optimizer {
    pub state: OptimizerState<f32>,
    schedule: NoamSchedule,
    clip_norm: f64,
}

impl Optimizer {
    pub fn new(cfg: &OptimConfig) -> Self {
        let adam = AdamConfig {
            lr: cfg.peak_lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        };
        Self {
            state: OptimizerState::new(adam),
            schedule: NoamSchedule {
                peak_lr: cfg.peak_lr,
                warmup_steps: cfg.warmup_steps,
            },
            clip_norm: cfg.clip_norm,
        }
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    /// Clips, checks and applies one update. `epoch` only labels errors.
    pub fn step(&mut self, params: &mut ParamStore<f32>, mut grads: Gradients<f32>, epoch: usize) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Diverged {
                epoch,
                step: self.state.step + 1,
                detail: "non-finite gradient".into(),
            });
        }
        if self.clip_norm > 0.0 {
            grads.clip_global_norm(self.clip_norm);
        }
        self.state.config.lr = self.schedule.lr(self.state.step + 1);
        adam_step(params, &grads, &mut self.state)?;
        Ok(())
    }
}

/// Shuffled index batches for one epoch. A trailing batch of one is folded
/// into its predecessor so that every batch offers an in-batch negative.
pub fn epoch_batches(n: usize, batch_size: usize, seeds: SeedTree, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds.named("shuffle").child(epoch as u64).rng());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

pub fn check_loss(value: f64, epoch: usize, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            detail: format!("{what} is {value}"),
        })
    }
}
