//! Compact convolutional transformer.

mod backbone;
mod config;
pub mod forward;
pub mod init;

pub use backbone::{
    Backbone, ChannelStats, ConvStage, EncoderBlock, HeadProjections, LayerNormParams, LayerNorms, TaskParams,
    PROJECTION_NAMES,
};
pub(crate) use backbone::tensor_digest;
pub use config::{ImageShape, ModelConfig, TokenizerStage, POOL_WINDOW};
pub use forward::{ModelWeights, Pass, Trainable};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Backbone<T> {
    pub fn weights(&self) -> ModelWeights<'_, T> {
        ModelWeights {
            config: &self.config,
            tokenizer: &self.tokenizer,
            blocks: &self.blocks,
            attention: &self.attention,
            task: &self.task,
            stats: &self.stats,
        }
    }

    /// Evaluation-mode logits of the first-task model.
    pub fn forward_logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = forward::eval_batch(self.weights(), &[image])?;
        Ok(out.remove(0).1)
    }
}

/// Check that a head with `classes` outputs matches the requested task width.
pub fn check_head_width(head_classes: usize, requested: usize) -> Result<()> {
    if head_classes != requested {
        return Err(Error::Config(format!(
            "head has {head_classes} classes but the task has {requested}"
        )));
    }
    Ok(())
}
