use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::init::{kaiming_normal, trunc_normal};
use crate::model::ModelConfig;

const LINEAR_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones([d]),
            beta: Tensor::zeros([d]),
        }
    }
}

/// Query/key/value projections of one attention head, each `d × d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjections<T: Scalar = f32> {
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

impl<T: Scalar> HeadProjections<T> {
    pub fn as_array(&self) -> [&Tensor<T>; 3] {
        [&self.query, &self.key, &self.value]
    }

    pub fn as_array_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.query, &mut self.key, &mut self.value]
    }

    pub fn from_array([query, key, value]: [Tensor<T>; 3]) -> Self {
        HeadProjections { query, key, value }
    }
}

pub const PROJECTION_NAMES: [&str; 3] = ["query", "key", "value"];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-layer weights shared by every task: output projection and FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T: Scalar = f32> {
    pub out_proj: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub ffn_in: Tensor<T>,
    pub ffn_in_bias: Tensor<T>,
    pub ffn_out: Tensor<T>,
    pub ffn_out_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorms<T: Scalar = f32> {
    pub attn: LayerNormParams<T>,
    pub ffn: LayerNormParams<T>,
}

/// The parameters each task owns outright: layernorms, sequence pool and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams<T: Scalar = f32> {
    pub norms: Vec<LayerNorms<T>>,
    pub final_norm: LayerNormParams<T>,
    pub pool_weight: Tensor<T>,
    pub pool_bias: Tensor<T>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

impl<T: Scalar> TaskParams<T> {
    pub fn new<R: rand::Rng + ?Sized>(config: &ModelConfig, classes: usize, rng: &mut R) -> Self {
        let d = config.embed_dim;
        TaskParams {
            norms: (0..config.layers)
                .map(|_| LayerNorms {
                    attn: LayerNormParams::identity(d),
                    ffn: LayerNormParams::identity(d),
                })
                .collect(),
            final_norm: LayerNormParams::identity(d),
            pool_weight: trunc_normal(&[d, 1], LINEAR_STD, rng),
            pool_bias: Tensor::zeros([1]),
            head_weight: trunc_normal(&[d, classes], LINEAR_STD, rng),
            head_bias: Tensor::zeros([classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.head_bias.numel()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, n) in self.norms.iter().enumerate() {
            out.push((format!("task.layers.{l}.ln1.gamma"), &n.attn.gamma));
            out.push((format!("task.layers.{l}.ln1.beta"), &n.attn.beta));
            out.push((format!("task.layers.{l}.ln2.gamma"), &n.ffn.gamma));
            out.push((format!("task.layers.{l}.ln2.beta"), &n.ffn.beta));
        }
        out.push(("task.final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("task.final_norm.beta".into(), &self.final_norm.beta));
        out.push(("task.pool.weight".into(), &self.pool_weight));
        out.push(("task.pool.bias".into(), &self.pool_bias));
        out.push(("task.head.weight".into(), &self.head_weight));
        out.push(("task.head.bias".into(), &self.head_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for n in &mut self.norms {
            out.push(&mut n.attn.gamma);
            out.push(&mut n.attn.beta);
            out.push(&mut n.ffn.gamma);
            out.push(&mut n.ffn.beta);
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out.push(&mut self.pool_weight);
        out.push(&mut self.pool_bias);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn cast<U: Scalar>(&self) -> TaskParams<U> {
        let ln = |p: &LayerNormParams<T>| LayerNormParams {
            gamma: p.gamma.cast(),
            beta: p.beta.cast(),
        };
        TaskParams {
            norms: self
                .norms
                .iter()
                .map(|n| LayerNorms {
                    attn: ln(&n.attn),
                    ffn: ln(&n.ffn),
                })
                .collect(),
            final_norm: ln(&self.final_norm),
            pool_weight: self.pool_weight.cast(),
            pool_bias: self.pool_bias.cast(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }
}

/// Per-channel input standardization, computed on first-task training data.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T: Scalar = f32> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

impl<T: Scalar> ChannelStats<T> {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: Tensor::zeros([channels]),
            std: Tensor::ones([channels]),
        }
    }

    /// `(x - mean_c) / std_c` for a `C × H × W` image.
    pub fn standardize(&self, image: &Tensor<T>) -> Tensor<T> {
        let c = self.mean.numel();
        let plane = image.numel() / c;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / plane;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        out
    }
}

/// First-task CCT parameters. Frozen after first-task training; every
/// later task reads it but never writes it.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tokenizer: Vec<ConvStage<T>>,
    pub blocks: Vec<EncoderBlock<T>>,
    /// `attention[l][h]`
    pub attention: Vec<Vec<HeadProjections<T>>>,
    pub task: TaskParams<T>,
    pub stats: ChannelStats<T>,
    /// Global class ids of the first task, in head order.
    pub classes: Vec<usize>,
    frozen: bool,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: ModelConfig, classes: Vec<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.len() != config.classes_first_task {
            return Err(Error::Config(format!(
                "{} class ids given for a {}-way first task",
                classes.len(),
                config.classes_first_task
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let dk = config.head_dim();
        let hidden = config.ffn_hidden();
        let mut in_c = config.image.channels;
        let mut tokenizer = Vec::new();
        for s in &config.tokenizer {
            let fan_in = in_c * s.kernel * s.kernel;
            tokenizer.push(ConvStage {
                weight: kaiming_normal(&[s.out_channels, in_c, s.kernel, s.kernel], fan_in, &mut rng),
                bias: Tensor::zeros([s.out_channels]),
            });
            in_c = s.out_channels;
        }
        let mut blocks = Vec::new();
        let mut attention = Vec::new();
        for _ in 0..config.layers {
            attention.push(
                (0..config.heads)
                    .map(|_| HeadProjections {
                        query: trunc_normal(&[d, dk], LINEAR_STD, &mut rng),
                        key: trunc_normal(&[d, dk], LINEAR_STD, &mut rng),
                        value: trunc_normal(&[d, dk], LINEAR_STD, &mut rng),
                    })
                    .collect(),
            );
            blocks.push(EncoderBlock {
                out_proj: trunc_normal(&[d, d], LINEAR_STD, &mut rng),
                out_bias: Tensor::zeros([d]),
                ffn_in: trunc_normal(&[d, hidden], LINEAR_STD, &mut rng),
                ffn_in_bias: Tensor::zeros([hidden]),
                ffn_out: trunc_normal(&[hidden, d], LINEAR_STD, &mut rng),
                ffn_out_bias: Tensor::zeros([d]),
            });
        }
        let task = TaskParams::new(&config, config.classes_first_task, &mut rng);
        let stats = ChannelStats::identity(config.image.channels);
        Ok(Backbone {
            config,
            tokenizer,
            blocks,
            attention,
            task,
            stats,
            classes,
            frozen: false,
        })
    }

    /// Assemble from parts; used by checkpoint loading.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: ModelConfig,
        tokenizer: Vec<ConvStage<T>>,
        blocks: Vec<EncoderBlock<T>>,
        attention: Vec<Vec<HeadProjections<T>>>,
        task: TaskParams<T>,
        stats: ChannelStats<T>,
        classes: Vec<usize>,
        frozen: bool,
    ) -> Self {
        Backbone {
            config,
            tokenizer,
            blocks,
            attention,
            task,
            stats,
            classes,
            frozen,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn ensure_trainable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::Usage("backbone is frozen".into()));
        }
        Ok(())
    }

    /// Every tensor with a stable name: tokenizer, shared blocks, attention, task params, stats.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.tokenizer.iter().enumerate() {
            out.push((format!("tokenizer.{i}.weight"), &s.weight));
            out.push((format!("tokenizer.{i}.bias"), &s.bias));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{l}.out_proj.weight"), &b.out_proj));
            out.push((format!("layers.{l}.out_proj.bias"), &b.out_bias));
            out.push((format!("layers.{l}.ffn_in.weight"), &b.ffn_in));
            out.push((format!("layers.{l}.ffn_in.bias"), &b.ffn_in_bias));
            out.push((format!("layers.{l}.ffn_out.weight"), &b.ffn_out));
            out.push((format!("layers.{l}.ffn_out.bias"), &b.ffn_out_bias));
        }
        for (l, heads) in self.attention.iter().enumerate() {
            for (h, p) in heads.iter().enumerate() {
                for (name, t) in PROJECTION_NAMES.iter().zip(p.as_array()) {
                    out.push((format!("layers.{l}.heads.{h}.{name}"), t));
                }
            }
        }
        out.extend(self.task.named());
        out.push(("stats.mean".into(), &self.stats.mean));
        out.push(("stats.std".into(), &self.stats.std));
        out
    }

    /// Trainable tensors in the same order as [`Backbone::named_tensors`], minus the stats.
    pub fn trainable_mut(&mut self) -> Result<Vec<&mut Tensor<T>>> {
        self.ensure_trainable()?;
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for s in &mut self.tokenizer {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        for b in &mut self.blocks {
            out.push(&mut b.out_proj);
            out.push(&mut b.out_bias);
            out.push(&mut b.ffn_in);
            out.push(&mut b.ffn_in_bias);
            out.push(&mut b.ffn_out);
            out.push(&mut b.ffn_out_bias);
        }
        for heads in &mut self.attention {
            for p in heads {
                out.extend(p.as_array_mut());
            }
        }
        out.extend(self.task.tensors_mut());
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        let n: usize = self.named_tensors().iter().map(|(_, t)| t.numel()).sum();
        n - self.stats.mean.numel() - self.stats.std.numel()
    }

    /// SHA-256 over every tensor's name, shape and bit pattern.
    pub fn digest(&self) -> String {
        tensor_digest(self.named_tensors().into_iter())
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            tokenizer: self
                .tokenizer
                .iter()
                .map(|s| ConvStage {
                    weight: s.weight.cast(),
                    bias: s.bias.cast(),
                })
                .collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    out_proj: b.out_proj.cast(),
                    out_bias: b.out_bias.cast(),
                    ffn_in: b.ffn_in.cast(),
                    ffn_in_bias: b.ffn_in_bias.cast(),
                    ffn_out: b.ffn_out.cast(),
                    ffn_out_bias: b.ffn_out_bias.cast(),
                })
                .collect(),
            attention: self
                .attention
                .iter()
                .map(|hs| {
                    hs.iter()
                        .map(|p| HeadProjections {
                            query: p.query.cast(),
                            key: p.key.cast(),
                            value: p.value.cast(),
                        })
                        .collect()
                })
                .collect(),
            task: self.task.cast(),
            stats: ChannelStats {
                mean: self.stats.mean.cast(),
                std: self.stats.std.cast(),
            },
            classes: self.classes.clone(),
            frozen: self.frozen,
        }
    }
}

pub(crate) fn tensor_digest<'a, T: Scalar>(tensors: impl Iterator<Item = (String, &'a Tensor<T>)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
