//! Per-task adaptation of the frozen backbone.
//!
//! Each later task convolves every frozen query/key/value projection with
//! its own small kernel and adds back a sigmoid-gated copy of the original:
//!
//! ```text
//! W'  = conv(W, F)
//! W'' = W' + σ(α) · W
//! ```
//!
//! Layernorms, sequence pool and classifier are replaced outright. The
//! output projections, FFNs and tokenizer are shared and never touched.

mod ledger;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Activation, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::forward::{self, BoundModel, ModelWeights, Trainable};
use crate::model::init::trunc_normal;
use crate::model::{Backbone, HeadProjections, ModelConfig, TaskParams, PROJECTION_NAMES};

pub use ledger::{count_task_params, ParamLedger};

/// How the skip term `g · W` is weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `g = σ(α)` with learnable `α`.
    #[default]
    Learnable,
    /// `g = 1`
    AlwaysOn,
    /// `g = 0`
    Off,
}

impl GateMode {
    pub fn gate(self, alpha: f64) -> f64 {
        match self {
            GateMode::Learnable => kernels::sigmoid(alpha),
            GateMode::AlwaysOn => 1.0,
            GateMode::Off => 0.0,
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(GateMode::Learnable),
            "always_on" => Ok(GateMode::AlwaysOn),
            "off" => Ok(GateMode::Off),
            other => Err(Error::Config(format!("unknown gate mode {other:?}"))),
        }
    }
}

/// `conv2d_same(W, F) + g·W`, evaluated directly.
pub fn adapt_weight<T: Scalar>(w: &Tensor<T>, f: &Tensor<T>, alpha: T, mode: GateMode) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let fv = tape.constant(f.clone());
    let av = tape.constant(Tensor::scalar(alpha));
    let out = adapt_weight_on(&mut tape, wv, fv, av, mode)?;
    Ok(tape.value(out).clone())
}

/// Tape version of [`adapt_weight`]; differentiable in `f` and `alpha`.
pub fn adapt_weight_on<T: Scalar>(tape: &mut Tape<T>, w: Var, f: Var, alpha: Var, mode: GateMode) -> Result<Var> {
    let convolved = tape.conv2d_same(w, f)?;
    match mode {
        GateMode::Off => Ok(convolved),
        GateMode::AlwaysOn => tape.add(convolved, w),
        GateMode::Learnable => {
            let g = tape.activation(alpha, Activation::Sigmoid);
            let skip = tape.scale_by(g, w)?;
            tape.add(convolved, skip)
        }
    }
}

/// The learnable per-task parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAdapter<T: Scalar = f32> {
    pub task_id: usize,
    pub kernel_size: usize,
    pub gate_mode: GateMode,
    /// Backbone configuration this adapter was built against.
    pub config: ModelConfig,
    /// `kernels[l][h] = [F^Q, F^K, F^V]`, each `k × k`.
    pub kernels: Vec<Vec<[Tensor<T>; 3]>>,
    /// `gates[l][h] = [α^Q, α^K, α^V]`, each one element.
    pub gates: Vec<Vec<[Tensor<T>; 3]>>,
    pub task: TaskParams<T>,
    /// Global class ids, in head order.
    pub classes: Vec<usize>,
}

/// Vars for an adapter bound on a tape, in [`TaskAdapter::trainable_mut`] order.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub kernels: Vec<Var>,
    pub gates: Vec<Var>,
}

impl<T: Scalar> TaskAdapter<T> {
    /// Fresh adapter whose materialized model reproduces the backbone's
    /// pooled features: kernels are scaled deltas chosen so that `W'' = W`,
    /// gates are zero, layernorms and the pool are copied, the head is new.
    pub fn init(
        backbone: &Backbone<T>,
        task_id: usize,
        classes: Vec<usize>,
        kernel_size: usize,
        gate_mode: GateMode,
        seed: u64,
    ) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Usage("adapters can only be built on a frozen backbone".into()));
        }
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel_size}")));
        }
        if classes.is_empty() {
            return Err(Error::Config("task needs at least one class".into()));
        }
        let cfg = &backbone.config;
        let max_k = 2 * cfg.embed_dim.min(cfg.head_dim()) + 1;
        if kernel_size > max_k {
            return Err(Error::Config(format!(
                "kernel size {kernel_size} exceeds {max_k} for {}x{} projections",
                cfg.embed_dim,
                cfg.head_dim()
            )));
        }
        let center = T::lit(1.0 - gate_mode.gate(0.0));
        let delta = Tensor::from_fn([kernel_size, kernel_size], |i| {
            if i == (kernel_size * kernel_size) / 2 {
                center
            } else {
                T::zero()
            }
        });
        let per_head = |t: &Tensor<T>| -> Vec<Vec<[Tensor<T>; 3]>> {
            (0..cfg.layers)
                .map(|_| (0..cfg.heads).map(|_| [t.clone(), t.clone(), t.clone()]).collect())
                .collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut task = backbone.task.clone();
        task.head_weight = trunc_normal(&[cfg.embed_dim, classes.len()], 0.02, &mut rng);
        task.head_bias = Tensor::zeros([classes.len()]);
        Ok(TaskAdapter {
            task_id,
            kernel_size,
            gate_mode,
            config: cfg.clone(),
            kernels: per_head(&delta),
            gates: per_head(&Tensor::zeros([1])),
            task,
            classes,
        })
    }

    /// Trainable tensors: kernels, gates, then task params.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for heads in &mut self.kernels {
            for f in heads {
                out.extend(f.iter_mut());
            }
        }
        for heads in &mut self.gates {
            for a in heads {
                out.extend(a.iter_mut());
            }
        }
        out.extend(self.task.tensors_mut());
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (group, set) in [("kernels", &self.kernels), ("gates", &self.gates)] {
            for (l, heads) in set.iter().enumerate() {
                for (h, triple) in heads.iter().enumerate() {
                    for (name, t) in PROJECTION_NAMES.iter().zip(triple) {
                        out.push((format!("{group}.{l}.{h}.{name}"), t));
                    }
                }
            }
        }
        out.extend(self.task.named());
        out
    }

    /// Number of trainable scalars; equals [`count_task_params`] for this configuration.
    pub fn num_trainable(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn digest(&self) -> String {
        crate::model::tensor_digest(self.named_tensors().into_iter())
    }

    /// Fail unless this adapter was built for a backbone shaped like `backbone`.
    pub fn check_compatible(&self, backbone: &Backbone<T>) -> Result<()> {
        let (a, b) = (&self.config, &backbone.config);
        let dims = |c: &ModelConfig| (c.embed_dim, c.layers, c.heads, c.head_dim());
        if dims(a) != dims(b) {
            return Err(Error::ConfigMismatch(format!(
                "adapter built for (d, L, H, d_k) = {:?}, backbone has {:?}",
                dims(a),
                dims(b)
            )));
        }
        if a != b {
            return Err(Error::ConfigMismatch("adapter and backbone model configs differ".into()));
        }
        let shape_ok = self.kernels.len() == a.layers
            && self.gates.len() == a.layers
            && self.kernels.iter().chain(&self.gates).all(|h| h.len() == a.heads)
            && self.task.classes() == self.classes.len();
        if !shape_ok {
            return Err(Error::ConfigMismatch("adapter tensors do not match its config".into()));
        }
        Ok(())
    }

    /// Put the adapter on `tape` with `W''` computed from the frozen backbone
    /// inside the tape, so gradients reach kernels and gates.
    pub fn bind<'a>(
        &'a self,
        tape: &mut Tape<T>,
        backbone: &'a Backbone<T>,
        trainable: bool,
    ) -> Result<(BoundModel<'a, T>, AdapterVars)> {
        self.check_compatible(backbone)?;
        let put = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut vars = AdapterVars {
            kernels: Vec::new(),
            gates: Vec::new(),
        };
        for heads in &self.kernels {
            for triple in heads {
                for t in triple {
                    vars.kernels.push(put(tape, t));
                }
            }
        }
        for heads in &self.gates {
            for triple in heads {
                for t in triple {
                    vars.gates.push(put(tape, t));
                }
            }
        }
        let mut attention = Vec::with_capacity(self.config.layers);
        let mut idx = 0;
        for heads in &backbone.attention {
            let mut bound = Vec::with_capacity(heads.len());
            for proj in heads {
                let mut triple = [vars.kernels[0]; 3];
                for (slot, w) in triple.iter_mut().zip(proj.as_array()) {
                    let wv = tape.constant(w.clone());
                    *slot = adapt_weight_on(tape, wv, vars.kernels[idx], vars.gates[idx], self.gate_mode)?;
                    idx += 1;
                }
                bound.push(triple);
            }
            attention.push(bound);
        }
        let weights = ModelWeights {
            task: &self.task,
            ..backbone.weights()
        };
        let model = forward::bind_with_attention(
            tape,
            weights,
            attention,
            Trainable {
                task: trainable,
                ..Trainable::NONE
            },
        )?;
        Ok((model, vars))
    }
}

/// An immutable, fully resolved model for one task.
#[derive(Clone, Debug)]
pub struct TaskModel<'a, T: Scalar = f32> {
    pub backbone: &'a Backbone<T>,
    /// Effective projections `W''` (the backbone's own for the first task).
    pub attention: Vec<Vec<HeadProjections<T>>>,
    pub task: TaskParams<T>,
    pub task_id: usize,
    pub classes: Vec<usize>,
}

impl<'a, T: Scalar> TaskModel<'a, T> {
    /// The first task's model is the frozen backbone itself.
    pub fn base(backbone: &'a Backbone<T>) -> Self {
        TaskModel {
            backbone,
            attention: backbone.attention.clone(),
            task: backbone.task.clone(),
            task_id: 1,
            classes: backbone.classes.clone(),
        }
    }

    /// Apply the adapter to every frozen projection and install its task params.
    pub fn materialize(backbone: &'a Backbone<T>, adapter: &TaskAdapter<T>) -> Result<Self> {
        adapter.check_compatible(backbone)?;
        let attention = backbone
            .attention
            .iter()
            .zip(&adapter.kernels)
            .zip(&adapter.gates)
            .map(|((heads, kernels), gates)| {
                heads
                    .iter()
                    .zip(kernels)
                    .zip(gates)
                    .map(|((proj, f), a)| {
                        let w = proj.as_array();
                        Ok(HeadProjections::from_array([
                            adapt_weight(w[0], &f[0], a[0][0], adapter.gate_mode)?,
                            adapt_weight(w[1], &f[1], a[1][0], adapter.gate_mode)?,
                            adapt_weight(w[2], &f[2], a[2][0], adapter.gate_mode)?,
                        ]))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskModel {
            backbone,
            attention,
            task: adapter.task.clone(),
            task_id: adapter.task_id,
            classes: adapter.classes.clone(),
        })
    }

    pub fn weights(&self) -> ModelWeights<'_, T> {
        ModelWeights {
            attention: &self.attention,
            task: &self.task,
            ..self.backbone.weights()
        }
    }

    /// Evaluation-mode `(pooled, logits)` for each image.
    pub fn eval_batch(&self, images: &[&Tensor<T>]) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        forward::eval_batch(self.weights(), images)
    }
}

#[cfg(test)]
mod tests;
