//! Exemplar-free continual learning for compact convolutional transformers.
//!
//! A backbone is trained on the first task and frozen. Every later task
//! learns a small [`TaskAdapter`]: per-head convolution kernels applied to
//! the frozen query/key/value projections, sigmoid skip-gates, and fresh
//! layernorm, pooling and head parameters. At test time the task is
//! inferred from the entropy of predictions averaged over augmented views.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod inference;
pub mod model;
pub mod train;

pub use adapter::{count_task_params, GateMode, ParamLedger, TaskAdapter, TaskModel};
pub use autodiff::{Scalar, Tape, Tensor, Var};
pub use config::{DataFormat, Profile, RunConfig};
pub use error::{Error, Result};
pub use inference::{InferenceConfig, TaskPrediction};
pub use model::{Backbone, ModelConfig};
pub use train::{EvalReport, TrainConfig};
