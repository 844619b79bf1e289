//! CCT forward pass recorded on a [`Tape`].

use rand::RngCore;

use crate::autodiff::{Activation, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::backbone::{ChannelStats, ConvStage, EncoderBlock, HeadProjections, TaskParams};
use crate::model::config::POOL_WINDOW;
use crate::model::ModelConfig;

/// Borrowed view of every tensor a forward pass needs.
#[derive(Clone, Copy, Debug)]
pub struct ModelWeights<'a, T: Scalar> {
    pub config: &'a ModelConfig,
    pub tokenizer: &'a [ConvStage<T>],
    pub blocks: &'a [EncoderBlock<T>],
    pub attention: &'a [Vec<HeadProjections<T>>],
    pub task: &'a TaskParams<T>,
    pub stats: &'a ChannelStats<T>,
}

/// Which parameter groups are bound as trainable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    /// Tokenizer, output projections and FFNs.
    pub shared: bool,
    pub attention: bool,
    /// Layernorms, sequence pool and head.
    pub task: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        shared: false,
        attention: false,
        task: false,
    };
    pub const ALL: Trainable = Trainable {
        shared: true,
        attention: true,
        task: true,
    };
}

/// Training passes sample dropout masks; evaluation passes are deterministic.
pub enum Pass<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    /// `[query, key, value]` per head.
    pub heads: Vec<[Var; 3]>,
    pub out_proj: Var,
    pub out_bias: Var,
    pub ffn_in: Var,
    pub ffn_in_bias: Var,
    pub ffn_out: Var,
    pub ffn_out_bias: Var,
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
}

/// A model whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel<'a, T: Scalar> {
    pub config: &'a ModelConfig,
    pub stats: &'a ChannelStats<T>,
    pub tokenizer: Vec<(Var, Var)>,
    pub layers: Vec<BoundLayer>,
    pub final_norm: (Var, Var),
    pub pool: (Var, Var),
    pub head: (Var, Var),
    pub pos: Var,
}

impl<T: Scalar> BoundModel<'_, T> {
    /// Shared-group vars in the canonical order used by `Backbone::trainable_mut`.
    pub fn shared_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.tokenizer {
            out.extend([w, b]);
        }
        for l in &self.layers {
            out.extend([l.out_proj, l.out_bias, l.ffn_in, l.ffn_in_bias, l.ffn_out, l.ffn_out_bias]);
        }
        out
    }

    pub fn attention_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.heads.iter().flatten().copied()).collect()
    }

    /// Task-group vars in the order of `TaskParams::tensors_mut`.
    pub fn task_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([l.ln1.0, l.ln1.1, l.ln2.0, l.ln2.1]);
        }
        out.extend([
            self.final_norm.0,
            self.final_norm.1,
            self.pool.0,
            self.pool.1,
            self.head.0,
            self.head.1,
        ]);
        out
    }

    pub fn classes(&self, tape: &Tape<T>) -> usize {
        tape.value(self.head.1).numel()
    }
}

fn put<T: Scalar>(tape: &mut Tape<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Bind all weights, including the attention projections from `weights.attention`.
pub fn bind<'a, T: Scalar>(tape: &mut Tape<T>, weights: ModelWeights<'a, T>, trainable: Trainable) -> Result<BoundModel<'a, T>> {
    let attention = weights
        .attention
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|p| p.as_array().map(|t| put(tape, t, trainable.attention)))
                .collect()
        })
        .collect();
    bind_with_attention(tape, weights, attention, trainable)
}

/// Bind everything except attention, which is supplied as vars already on
/// the tape (e.g. adapted projections). `weights.attention` is ignored.
pub fn bind_with_attention<'a, T: Scalar>(
    tape: &mut Tape<T>,
    weights: ModelWeights<'a, T>,
    attention: Vec<Vec<[Var; 3]>>,
    trainable: Trainable,
) -> Result<BoundModel<'a, T>> {
    let cfg = weights.config;
    if attention.len() != cfg.layers || attention.iter().any(|h| h.len() != cfg.heads) {
        return Err(Error::Config("attention projections do not match layers × heads".into()));
    }
    if weights.blocks.len() != cfg.layers || weights.task.norms.len() != cfg.layers {
        return Err(Error::Config("layer count mismatch between config and weights".into()));
    }
    let tokenizer = weights
        .tokenizer
        .iter()
        .map(|s| (put(tape, &s.weight, trainable.shared), put(tape, &s.bias, trainable.shared)))
        .collect();
    let task = weights.task;
    let mut layers = Vec::with_capacity(cfg.layers);
    for ((b, heads), norms) in weights.blocks.iter().zip(attention).zip(&task.norms) {
        let s = trainable.shared;
        let t = trainable.task;
        layers.push(BoundLayer {
            heads,
            out_proj: put(tape, &b.out_proj, s),
            out_bias: put(tape, &b.out_bias, s),
            ffn_in: put(tape, &b.ffn_in, s),
            ffn_in_bias: put(tape, &b.ffn_in_bias, s),
            ffn_out: put(tape, &b.ffn_out, s),
            ffn_out_bias: put(tape, &b.ffn_out_bias, s),
            ln1: (put(tape, &norms.attn.gamma, t), put(tape, &norms.attn.beta, t)),
            ln2: (put(tape, &norms.ffn.gamma, t), put(tape, &norms.ffn.beta, t)),
        });
    }
    let t = trainable.task;
    let final_norm = (put(tape, &task.final_norm.gamma, t), put(tape, &task.final_norm.beta, t));
    let pool = (put(tape, &task.pool_weight, t), put(tape, &task.pool_bias, t));
    let head = (put(tape, &task.head_weight, t), put(tape, &task.head_bias, t));
    let pos = tape.constant(sinusoidal_pos_embed(cfg.num_tokens()?, cfg.embed_dim)?);
    Ok(BoundModel {
        config: cfg,
        stats: weights.stats,
        tokenizer,
        layers,
        final_norm,
        pool,
        head,
        pos,
    })
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_pos_embed<T: Scalar>(n: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) || d == 0 {
        return Err(Error::Config(format!("positional embedding needs an even dimension, got {d}")));
    }
    Ok(Tensor::from_fn([n, d], |idx| {
        let (p, j) = (idx / d, idx % d);
        let i2 = (j - j % 2) as f64;
        let angle = p as f64 / 10000f64.powf(i2 / d as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Convolutional tokenizer on an already-standardized `C × H × W` image;
/// returns `n × d` tokens with positional embedding added.
pub fn tokenize<T: Scalar>(tape: &mut Tape<T>, model: &BoundModel<'_, T>, image: Var) -> Result<Var> {
    let cfg = model.config;
    if tape.value(image).shape() != cfg.image.dims() {
        return Err(Error::shape("tokenize", tape.value(image).shape(), &cfg.image.dims()));
    }
    let mut x = image;
    for (stage, &(w, b)) in cfg.tokenizer.iter().zip(&model.tokenizer) {
        x = tape.conv2d(x, w, b, stage.stride, stage.padding)?;
        x = tape.activation(x, Activation::Relu);
        if stage.pooling {
            x = tape.max_pool2d(x, POOL_WINDOW.kernel, POOL_WINDOW.stride, POOL_WINDOW.padding)?;
        }
    }
    let &[d, h, w] = tape.value(x).shape() else { unreachable!("conv output is rank 3") };
    let flat = tape.reshape(x, [d, h * w])?;
    let tokens = tape.transpose(flat)?;
    tape.add(tokens, model.pos)
}

/// `softmax(QKᵀ/√d_k)·V` for one head; dropout on the attention weights in training.
pub fn attention_head<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    [wq, wk, wv]: [Var; 3],
    dropout: f64,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let q = tape.matmul(z, wq)?;
    let k = tape.matmul(z, wk)?;
    let v = tape.matmul(z, wv)?;
    let dk = tape.value(wq).shape()[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::lit(1.0 / (dk as f64).sqrt()));
    let mut attn = tape.softmax(scaled, 1)?;
    if let Pass::Train(rng) = pass {
        attn = tape.dropout(attn, dropout, &mut **rng);
    }
    tape.matmul(attn, v)
}

/// Concatenated heads through the output projection.
pub fn mhsa<T: Scalar>(tape: &mut Tape<T>, z: Var, layer: &BoundLayer, dropout: f64, pass: &mut Pass<'_>) -> Result<Var> {
    let heads = layer
        .heads
        .iter()
        .map(|&w| attention_head(tape, z, w, dropout, pass))
        .collect::<Result<Vec<_>>>()?;
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    let proj = tape.matmul(cat, layer.out_proj)?;
    tape.add_row_bias(proj, layer.out_bias)
}

/// Pre-norm encoder layer with stochastic depth on both residual branches.
pub fn encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    layer: &BoundLayer,
    config: &ModelConfig,
    pass: &mut Pass<'_>,
) -> Result<Var> {
    let eps = T::lit(config.layer_norm_eps);
    let n1 = tape.layer_norm(z, layer.ln1.0, layer.ln1.1, eps)?;
    let mut a = mhsa(tape, n1, layer, config.attn_dropout, pass)?;
    if let Pass::Train(rng) = pass {
        a = tape.drop_path(a, config.stochastic_depth, &mut **rng);
    }
    let u = tape.add(z, a)?;
    let n2 = tape.layer_norm(u, layer.ln2.0, layer.ln2.1, eps)?;
    let h = tape.matmul(n2, layer.ffn_in)?;
    let h = tape.add_row_bias(h, layer.ffn_in_bias)?;
    let h = tape.activation(h, Activation::Gelu);
    let h = tape.matmul(h, layer.ffn_out)?;
    let mut f = tape.add_row_bias(h, layer.ffn_out_bias)?;
    if let Pass::Train(rng) = pass {
        f = tape.drop_path(f, config.stochastic_depth, &mut **rng);
    }
    tape.add(u, f)
}

/// Attention-weighted mean of tokens: `softmax(z·w + b)ᵀ · z`, returned as `1 × d`.
pub fn sequence_pool<T: Scalar>(tape: &mut Tape<T>, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let scores = tape.matmul(z, weight)?;
    let scores = tape.add_row_bias(scores, bias)?;
    let w = tape.softmax(scores, 0)?;
    let wt = tape.transpose(w)?;
    tape.matmul(wt, z)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Sequence-pooled representation, `1 × d`.
    pub pooled: Var,
    /// `1 × classes`
    pub logits: Var,
}

/// Full forward pass for one raw image in `[0, 1]`.
pub fn forward_sample<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel<'_, T>,
    image: &Tensor<T>,
    pass: &mut Pass<'_>,
) -> Result<ForwardVars> {
    let x = tape.constant(model.stats.standardize(image));
    let mut z = tokenize(tape, model, x)?;
    for layer in &model.layers {
        z = encoder_layer(tape, z, layer, model.config, pass)?;
    }
    let eps = T::lit(model.config.layer_norm_eps);
    let z = tape.layer_norm(z, model.final_norm.0, model.final_norm.1, eps)?;
    let pooled = sequence_pool(tape, z, model.pool.0, model.pool.1)?;
    let logits = tape.matmul(pooled, model.head.0)?;
    let logits = tape.add_row_bias(logits, model.head.1)?;
    Ok(ForwardVars { pooled, logits })
}

/// Evaluation-mode outputs for a batch of images: `(pooled features, logits)` per image.
pub fn eval_batch<T: Scalar>(weights: ModelWeights<'_, T>, images: &[&Tensor<T>]) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let mut tape = Tape::new();
    let model = bind(&mut tape, weights, Trainable::NONE)?;
    images
        .iter()
        .map(|img| {
            let out = forward_sample(&mut tape, &model, img, &mut Pass::Eval)?;
            Ok((tape.value(out.pooled).clone(), tape.value(out.logits).clone()))
        })
        .collect()
}
