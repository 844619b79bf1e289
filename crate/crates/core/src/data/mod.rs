//! Dataset ingestion, continual task splits and training transforms.

mod cifar;
mod idx;
mod split;
mod synth;
mod transform;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ChannelStats, ImageShape};

pub use cifar::{load_cifar_binary, load_cifar_files, CifarVariant};
pub use idx::{load_idx, write_idx};
pub use split::{make_splits, TaskOrder, TaskSplit};
pub use synth::{synth_dataset, SynthData, SynthSpec, TemplateStyle};
pub use transform::{hflip, reflect_pad, TrainTransform};

/// Images in `[0, 1]` (`C × H × W`) with global labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub shape: ImageShape,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let Some(first) = images.first() else {
            return Err(Error::Data("dataset is empty".into()));
        };
        let &[channels, height, width] = first.shape() else {
            return Err(Error::Data(format!("images must be C×H×W, got {:?}", first.shape())));
        };
        if let Some(i) = images.iter().position(|im| im.shape() != first.shape()) {
            return Err(Error::Data(format!("image {i} has shape {:?}", images[i].shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            shape: ImageShape {
                channels,
                height,
                width,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Per-channel mean and (population) standard deviation over `indices`.
    pub fn channel_stats(&self, indices: &[usize]) -> Result<ChannelStats<f32>> {
        if indices.is_empty() {
            return Err(Error::Data("channel statistics over zero samples".into()));
        }
        let c = self.shape.channels;
        let plane = self.shape.height * self.shape.width;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for &i in indices {
            for (j, &v) in self.images[i].data().iter().enumerate() {
                sum[j / plane] += v as f64;
                sq[j / plane] += (v as f64) * (v as f64);
            }
        }
        let n = (indices.len() * plane) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0).sqrt() as f32).max(1e-6)
            })
            .collect();
        Ok(ChannelStats {
            mean: Tensor::new([c], mean)?,
            std: Tensor::new([c], std)?,
        })
    }
}
