//! Flat key/value run configuration covering model, training, inference
//! and data settings.
//!
//! ```toml
//! profile = "tiny"
//! epochs = 10
//! beta = 0.6
//! ```
//!
//! `profile` selects the defaults; every other key overrides one of them.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::GateMode;
use crate::data::{
    load_cifar_binary, load_cifar_files, load_idx, make_splits, synth_dataset, CifarVariant, Dataset, SynthSpec, TaskOrder, TaskSplit,
    TemplateStyle,
};
use crate::error::{Error, Result};
use crate::inference::{InferenceConfig, DEFAULT_AUGMENTATIONS};
use crate::model::{ImageShape, ModelConfig, TokenizerStage};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 32×32 RGB, d=256, 6 layers, 4 heads, k=15.
    Cifar,
    /// 16×16 gray, d=64, 2 layers, 2 heads, k=7, synthetic data.
    #[default]
    Tiny,
}

/// Where `--data` points and how it is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Directory with `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
    Idx,
    /// Directory with `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10,
    /// Directory with `train.bin` and `test.bin`.
    Cifar100,
    /// Generated from the `synth_*` keys; no files needed.
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,

    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Number of stacked tokenizer convolutions.
    pub tokenizer_layers: usize,
    pub tokenizer_kernel: usize,
    pub tokenizer_stride: usize,
    pub tokenizer_padding: usize,
    pub tokenizer_pooling: bool,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub attn_dropout: f64,
    pub stochastic_depth: f64,
    pub layer_norm_eps: f64,
    pub kernel_size: usize,
    pub gate_mode: GateMode,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub restart_period: f64,
    pub restart_mult: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay_base: f64,
    pub weight_decay_adapter: f64,
    pub train_augment: bool,

    pub num_augmentations: usize,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize_entropy: Option<bool>,

    pub data_format: DataFormat,
    pub num_tasks: usize,
    pub task_order: TaskOrder,
    pub synth_classes: usize,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_separation: f64,
    pub synth_style: TemplateStyle,
    pub synth_blobs: usize,
    pub synth_bump_width: f64,
    pub synth_amplitude: f64,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let train = TrainConfig::default();
        let inference = InferenceConfig::default();
        let tiny = RunConfig {
            profile,
            seed: 0,
            embed_dim: 64,
            layers: 2,
            heads: 2,
            ffn_ratio: 2,
            tokenizer_layers: 1,
            tokenizer_kernel: 3,
            tokenizer_stride: 2,
            tokenizer_padding: 3,
            tokenizer_pooling: true,
            image_channels: 1,
            image_height: 16,
            image_width: 16,
            attn_dropout: 0.1,
            stochastic_depth: 0.1,
            layer_norm_eps: 1e-5,
            kernel_size: 7,
            gate_mode: GateMode::Learnable,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr_max: train.lr_max,
            lr_min: train.lr_min,
            restart_period: train.restart_period,
            restart_mult: train.restart_mult,
            adam_beta1: train.beta1,
            adam_beta2: train.beta2,
            adam_eps: train.eps,
            weight_decay_base: train.weight_decay_base,
            weight_decay_adapter: train.weight_decay_adapter,
            train_augment: false,
            num_augmentations: inference.num_augmentations,
            beta: inference.beta,
            normalize_entropy: None,
            data_format: DataFormat::Synth,
            num_tasks: 5,
            task_order: TaskOrder::Given,
            synth_classes: 10,
            synth_train_per_class: 100,
            synth_test_per_class: 50,
            synth_separation: 8.0,
            synth_style: TemplateStyle::Carrier,
            synth_blobs: 3,
            synth_bump_width: 1.0 / 6.0,
            synth_amplitude: 0.12,
        };
        match profile {
            Profile::Tiny => tiny,
            Profile::Cifar => {
                let m = ModelConfig::cifar();
                RunConfig {
                    embed_dim: m.embed_dim,
                    layers: m.layers,
                    heads: m.heads,
                    image_channels: m.image.channels,
                    image_height: m.image.height,
                    image_width: m.image.width,
                    kernel_size: 15,
                    epochs: 500,
                    batch_size: 64,
                    train_augment: true,
                    data_format: DataFormat::Cifar100,
                    num_tasks: 10,
                    ..tiny
                }
            }
        }
    }

    /// Parse a flat TOML document on top of its profile's defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let profile = match user.get("profile") {
            None => Profile::default(),
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
        };
        let mut merged = toml::Table::try_from(RunConfig::profile(profile)).map_err(|e| Error::Config(format!("{e}")))?;
        for (k, v) in user {
            merged.insert(k, v);
        }
        let config: RunConfig = merged.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1)?;
        self.train_config().validate()?;
        self.inference_config().validate()?;
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be at least 1".into()));
        }
        if self.data_format == DataFormat::Synth && !(self.synth_separation > 0.0) {
            return Err(Error::Config(format!("synth_separation must be positive, got {}", self.synth_separation)));
        }
        Ok(())
    }

    /// Model for a backbone whose first task has `classes_first_task` classes.
    pub fn model_config(&self, classes_first_task: usize) -> Result<ModelConfig> {
        if self.tokenizer_layers == 0 {
            return Err(Error::Config("tokenizer_layers must be at least 1".into()));
        }
        let config = ModelConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_ratio: self.ffn_ratio,
            tokenizer: (0..self.tokenizer_layers)
                .map(|_| TokenizerStage {
                    out_channels: self.embed_dim,
                    kernel: self.tokenizer_kernel,
                    stride: self.tokenizer_stride,
                    padding: self.tokenizer_padding,
                    pooling: self.tokenizer_pooling,
                })
                .collect(),
            attn_dropout: self.attn_dropout,
            stochastic_depth: self.stochastic_depth,
            image: self.image(),
            classes_first_task,
            layer_norm_eps: self.layer_norm_eps,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn image(&self) -> ImageShape {
        ImageShape {
            channels: self.image_channels,
            height: self.image_height,
            width: self.image_width,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            restart_period: self.restart_period,
            restart_mult: self.restart_mult,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay_base: self.weight_decay_base,
            weight_decay_adapter: self.weight_decay_adapter,
            augment: self.train_augment,
            seed: self.seed,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            num_augmentations: self.num_augmentations,
            beta: self.beta,
            normalize_entropy: self.normalize_entropy,
            augmentations: DEFAULT_AUGMENTATIONS.to_vec(),
            seed: self.seed,
        }
    }

    /// Synthetic data shaped like the model input.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.synth_classes,
            train_per_class: self.synth_train_per_class,
            test_per_class: self.synth_test_per_class,
            channels: self.image_channels,
            height: self.image_height,
            width: self.image_width,
            separation: self.synth_separation,
            blobs: self.synth_blobs,
            style: self.synth_style,
            bump_width: self.synth_bump_width,
            amplitude: self.synth_amplitude,
        }
    }
}

impl RunConfig {
    /// Train and test sets for this run. `dir` is required unless the data
    /// are synthetic.
    pub fn load_data(&self, dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
        let need_dir = || dir.ok_or_else(|| Error::Usage(format!("{:?} data needs a data directory", self.data_format)));
        let (train, test) = match self.data_format {
            DataFormat::Synth => {
                let d = synth_dataset(&self.synth_spec(), self.seed)?;
                (d.train, d.test)
            }
            DataFormat::Idx => {
                let d = need_dir()?;
                (
                    load_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"))?,
                    load_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte"))?,
                )
            }
            DataFormat::Cifar10 => {
                let d = need_dir()?;
                let batches: Vec<_> = (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect();
                (
                    load_cifar_files(&batches, CifarVariant::Cifar10)?,
                    load_cifar_binary(d.join("test_batch.bin"), CifarVariant::Cifar10)?,
                )
            }
            DataFormat::Cifar100 => {
                let d = need_dir()?;
                (
                    load_cifar_binary(d.join("train.bin"), CifarVariant::Cifar100)?,
                    load_cifar_binary(d.join("test.bin"), CifarVariant::Cifar100)?,
                )
            }
        };
        if train.shape != self.image() {
            return Err(Error::ConfigMismatch(format!(
                "data images are {:?}, config expects {:?}",
                train.shape.dims(),
                self.image().dims()
            )));
        }
        Ok((train, test))
    }

    /// Classes in the full dataset: `synth_classes` for synthetic data,
    /// 10 for IDX digits and CIFAR-10, 100 for CIFAR-100.
    pub fn dataset_classes(&self) -> usize {
        match self.data_format {
            DataFormat::Synth => self.synth_classes,
            DataFormat::Idx | DataFormat::Cifar10 => 10,
            DataFormat::Cifar100 => 100,
        }
    }

    pub fn classes_per_task(&self) -> Result<usize> {
        let total = self.dataset_classes();
        if !total.is_multiple_of(self.num_tasks) || total < self.num_tasks {
            return Err(Error::Config(format!("{total} classes do not split into {} equal tasks", self.num_tasks)));
        }
        Ok(total / self.num_tasks)
    }

    /// Load data and split it into `num_tasks` tasks.
    pub fn load_split(&self, dir: Option<&Path>) -> Result<(Dataset, Dataset, TaskSplit)> {
        let (train, test) = self.load_data(dir)?;
        let split = make_splits(&train, &test, self.num_tasks, self.seed, self.task_order)?;
        Ok((train, test, split))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::profile(Profile::default())
    }
}
