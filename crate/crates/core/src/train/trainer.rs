use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::TaskAdapter;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Dataset, TrainTransform};
use crate::error::{Error, Result};
use crate::inference::argmax;
use crate::model::forward::{bind, forward_sample, Pass, Trainable};
use crate::model::Backbone;
use crate::train::{adamw_step, AdamState, TrainConfig};

/// One task's training samples: `indices` into `dataset`, labelled by
/// position within `classes`.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a> {
    pub dataset: &'a Dataset,
    pub indices: &'a [usize],
    pub classes: &'a [usize],
}

impl TaskData<'_> {
    fn local_labels(&self) -> Result<Vec<usize>> {
        if self.indices.is_empty() {
            return Err(Error::Data("task has no training samples".into()));
        }
        self.indices
            .iter()
            .map(|&i| {
                let g = *self
                    .dataset
                    .labels
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
                self.classes
                    .iter()
                    .position(|&c| c == g)
                    .ok_or_else(|| Error::Data(format!("sample {i} has class {g}, not in {:?}", self.classes)))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Training-mode accuracy over the epoch.
    pub accuracy: f64,
    /// Rate at the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

pub(crate) struct BatchResult {
    loss: f64,
    correct: usize,
    grads: Vec<Tensor<f32>>,
}

pub(crate) trait Learner {
    fn batch(&self, images: &[Tensor<f32>], labels: &[usize], rng: &mut ChaCha8Rng) -> Result<BatchResult>;
    fn params_mut(&mut self) -> Result<Vec<&mut Tensor<f32>>>;
}

fn finish_batch(tape: &mut Tape<f32>, rows: Vec<Var>, labels: &[usize], params: &[Var]) -> Result<BatchResult> {
    let logits = tape.concat(&rows, 0)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let correct = rows
        .iter()
        .zip(labels)
        .filter(|(r, &l)| {
            let v: Vec<f64> = tape.value(**r).data().iter().map(|&x| x as f64).collect();
            argmax(&v) == l
        })
        .count();
    tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|&p| tape.grad(p).unwrap_or_else(|| Tensor::zeros(tape.value(p).shape().to_vec())))
        .collect();
    Ok(BatchResult {
        loss: tape.value(loss)[0] as f64,
        correct,
        grads,
    })
}

pub(crate) struct BackboneLearner<'a>(pub(crate) &'a mut Backbone<f32>);

impl Learner for BackboneLearner<'_> {
    fn batch(&self, images: &[Tensor<f32>], labels: &[usize], rng: &mut ChaCha8Rng) -> Result<BatchResult> {
        let mut tape = Tape::new();
        let model = bind(&mut tape, self.0.weights(), Trainable::ALL)?;
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            rows.push(forward_sample(&mut tape, &model, img, &mut Pass::Train(rng))?.logits);
        }
        let mut params = model.shared_vars();
        params.extend(model.attention_vars());
        params.extend(model.task_vars());
        finish_batch(&mut tape, rows, labels, &params)
    }

    fn params_mut(&mut self) -> Result<Vec<&mut Tensor<f32>>> {
        self.0.trainable_mut()
    }
}

struct AdapterLearner<'a> {
    backbone: &'a Backbone<f32>,
    adapter: &'a mut TaskAdapter<f32>,
}

impl Learner for AdapterLearner<'_> {
    fn batch(&self, images: &[Tensor<f32>], labels: &[usize], rng: &mut ChaCha8Rng) -> Result<BatchResult> {
        let mut tape = Tape::new();
        let (model, vars) = self.adapter.bind(&mut tape, self.backbone, true)?;
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            rows.push(forward_sample(&mut tape, &model, img, &mut Pass::Train(rng))?.logits);
        }
        let mut params = vars.kernels;
        params.extend(vars.gates);
        params.extend(model.task_vars());
        finish_batch(&mut tape, rows, labels, &params)
    }

    fn params_mut(&mut self) -> Result<Vec<&mut Tensor<f32>>> {
        Ok(self.adapter.trainable_mut())
    }
}

pub(crate) fn fit(
    learner: &mut impl Learner,
    data: TaskData<'_>,
    config: &TrainConfig,
    weight_decay: f64,
    stream: u64,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainLog> {
    config.validate()?;
    let labels = data.local_labels()?;
    let schedule = config.schedule()?;
    let adamw = config.adamw(weight_decay);
    let transform = if config.augment {
        TrainTransform::default()
    } else {
        TrainTransform::DISABLED
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let batches = labels.len().div_ceil(config.batch_size);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0, config.lr_max);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&j| transform.apply(&data.dataset.images[data.indices[j]], &mut rng))
                .collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&j| labels[j]).collect();
            let res = learner.batch(&images, &batch_labels, &mut rng)?;
            if !res.loss.is_finite() {
                return Err(Error::Data(format!("loss diverged at epoch {epoch}, batch {b}")));
            }
            lr = schedule.lr(epoch as f64 + b as f64 / batches as f64);
            adamw_step(&mut learner.params_mut()?, &res.grads, &mut state, lr, &adamw)?;
            loss_sum += res.loss * chunk.len() as f64;
            correct += res.correct;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / labels.len() as f64,
            accuracy: correct as f64 / labels.len() as f64,
            lr,
        };
        on_epoch(&stats);
        log.epochs.push(stats);
    }
    Ok(log)
}

/// Train every backbone parameter on the first task, then freeze it.
/// Channel statistics come from this task's training images only.
pub fn train_base(backbone: &mut Backbone<f32>, data: TaskData<'_>, config: &TrainConfig) -> Result<TrainLog> {
    train_base_logged(backbone, data, config, &mut |_| {})
}

pub fn train_base_logged(
    backbone: &mut Backbone<f32>,
    data: TaskData<'_>,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainLog> {
    backbone.ensure_trainable()?;
    if data.classes != backbone.classes.as_slice() {
        return Err(Error::Config(format!(
            "backbone was built for classes {:?}, data is for {:?}",
            backbone.classes, data.classes
        )));
    }
    if data.indices.is_empty() {
        return Err(Error::Data("first task has no training samples".into()));
    }
    backbone.stats = data.dataset.channel_stats(data.indices)?;
    let wd = config.weight_decay_base;
    let log = fit(&mut BackboneLearner(backbone), data, config, wd, 1, on_epoch)?;
    backbone.freeze();
    Ok(log)
}

/// Train only the adapter's kernels, gates and task parameters.
pub fn train_task(backbone: &Backbone<f32>, adapter: &mut TaskAdapter<f32>, data: TaskData<'_>, config: &TrainConfig) -> Result<TrainLog> {
    train_task_logged(backbone, adapter, data, config, &mut |_| {})
}

pub fn train_task_logged(
    backbone: &Backbone<f32>,
    adapter: &mut TaskAdapter<f32>,
    data: TaskData<'_>,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainLog> {
    if !backbone.is_frozen() {
        return Err(Error::Usage("train the first task and freeze the backbone before training adapters".into()));
    }
    adapter.check_compatible(backbone)?;
    if data.classes != adapter.classes.as_slice() {
        return Err(Error::Config(format!(
            "adapter was built for classes {:?}, data is for {:?}",
            adapter.classes, data.classes
        )));
    }
    let wd = config.weight_decay_adapter;
    let stream = adapter.task_id as u64;
    fit(&mut AdapterLearner { backbone, adapter }, data, config, wd, stream, on_epoch)
}
