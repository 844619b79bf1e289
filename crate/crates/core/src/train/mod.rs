//! Sequential training: the full backbone on the first task, adapters only
//! afterwards, then task- and class-incremental evaluation.

mod baseline;
mod eval;
mod optim;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use baseline::{naive_finetune, NaiveReport};
pub use eval::{accuracy, average_accuracy, evaluate, task_models, EvalMode, EvalReport};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use schedule::CosineWarmRestarts;
pub use trainer::{train_base, train_base_logged, train_task, train_task_logged, EpochStats, TaskData, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// First restart period, in epochs.
    pub restart_period: f64,
    pub restart_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_base: f64,
    pub weight_decay_adapter: f64,
    /// Pad-and-crop plus flip on training images.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr_max: 8e-4,
            lr_min: 1e-6,
            restart_period: 10.0,
            restart_mult: 2.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay_base: 0.05,
            weight_decay_adapter: 0.0,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("AdamW needs betas in [0, 1) and eps > 0".into()));
        }
        if self.weight_decay_base < 0.0 || self.weight_decay_adapter < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<CosineWarmRestarts> {
        CosineWarmRestarts::new(self.lr_max, self.lr_min, self.restart_period, self.restart_mult)
    }

    pub fn adamw(&self, weight_decay: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay,
        }
    }
}
