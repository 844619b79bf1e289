//! Task-identity inference for class-incremental evaluation.
//!
//! Every task model scores the test image by the entropy of its softmax
//! averaged over augmented views, blended with the entropy on the original
//! image. The model with the lowest score wins and classifies the
//! unaugmented image.

pub mod augment;

use serde::{Deserialize, Serialize};

use crate::adapter::TaskModel;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use augment::{augment_views, select_augmentations, Augmentation, DEFAULT_AUGMENTATIONS};

/// Tolerance on `Σp = 1` accepted by [`entropy`].
pub const DISTRIBUTION_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub num_augmentations: usize,
    /// Weight of the augmented-average entropy; `1 - beta` goes to the unaugmented entropy.
    pub beta: f64,
    /// Divide entropies by `ln C`. `None` enables it only when task widths differ.
    pub normalize_entropy: Option<bool>,
    pub augmentations: Vec<Augmentation>,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            num_augmentations: 10,
            beta: 0.6,
            normalize_entropy: None,
            augmentations: DEFAULT_AUGMENTATIONS.to_vec(),
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_augmentations == 0 {
            return Err(Error::Config("num_augmentations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.augmentations.is_empty() {
            return Err(Error::Config("augmentation pool is empty".into()));
        }
        Ok(())
    }

    /// The transforms actually applied, `num_augmentations` of them.
    pub fn views(&self) -> Vec<Augmentation> {
        select_augmentations(&self.augmentations, self.num_augmentations, self.seed)
    }
}

/// Something that maps an image to class logits for one task.
pub trait TaskClassifier: Sync {
    fn task_id(&self) -> usize;
    /// Global class ids in output order.
    fn classes(&self) -> &[usize];
    /// Evaluation-mode logits for each image.
    fn logits_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>>;
}

impl TaskClassifier for TaskModel<'_, f32> {
    fn task_id(&self) -> usize {
        self.task_id
    }

    fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn logits_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .eval_batch(images)?
            .into_iter()
            .map(|(_, logits)| logits.data().iter().map(|&v| v as f64).collect())
            .collect())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy `-Σ p ln p` (with `0 ln 0 = 0`), optionally divided by `ln C`.
pub fn entropy(p: &[f64], normalize: bool) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Data("entropy of an empty distribution".into()));
    }
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Data("distribution has negative or NaN entries".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::Data(format!("distribution sums to {total}, not 1")));
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    let h = h.max(0.0);
    if normalize && p.len() > 1 {
        Ok(h / (p.len() as f64).ln())
    } else {
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPrediction {
    /// Blended entropy score per model, in input order.
    pub scores: Vec<f64>,
    /// Index into the model list of the chosen model.
    pub chosen: usize,
    pub task_id: usize,
    /// Softmax averaged over augmented views, per model.
    pub averaged: Vec<Vec<f64>>,
    /// Softmax on the original image, per model.
    pub unaugmented: Vec<Vec<f64>>,
}

impl TaskPrediction {
    /// Global class predicted by the chosen model on the original image.
    pub fn label(&self, models: &[&dyn TaskClassifier]) -> usize {
        models[self.chosen].classes()[argmax(&self.unaugmented[self.chosen])]
    }

    /// The prediction that would have been made with only `models[..count]`.
    pub fn restrict(&self, models: &[&dyn TaskClassifier], count: usize, config: &InferenceConfig) -> Result<TaskPrediction> {
        if count == 0 || count > models.len() || models.len() != self.scores.len() {
            return Err(Error::Usage(format!("cannot restrict {} models to {count}", self.scores.len())));
        }
        let models = &models[..count];
        let normalize = use_normalization(models, config);
        let scores = (0..count)
            .map(|i| blended_score(&self.averaged[i], &self.unaugmented[i], config.beta, normalize))
            .collect::<Result<Vec<_>>>()?;
        let chosen = choose(&scores, models);
        Ok(TaskPrediction {
            task_id: models[chosen].task_id(),
            scores,
            chosen,
            averaged: self.averaged[..count].to_vec(),
            unaugmented: self.unaugmented[..count].to_vec(),
        })
    }
}

/// `beta · H(averaged) + (1 - beta) · H(unaugmented)`.
pub fn blended_score(averaged: &[f64], unaugmented: &[f64], beta: f64, normalize: bool) -> Result<f64> {
    Ok(beta * entropy(averaged, normalize)? + (1.0 - beta) * entropy(unaugmented, normalize)?)
}

fn choose(scores: &[f64], models: &[&dyn TaskClassifier]) -> usize {
    (0..models.len())
        .min_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(models[a].task_id().cmp(&models[b].task_id()))
        })
        .expect("non-empty")
}

fn use_normalization(models: &[&dyn TaskClassifier], config: &InferenceConfig) -> bool {
    config.normalize_entropy.unwrap_or_else(|| {
        let first = models[0].classes().len();
        models.iter().any(|m| m.classes().len() != first)
    })
}

/// Choose the task whose model is most confident and consistent across views.
pub fn predict_task(image: &Tensor<f32>, models: &[&dyn TaskClassifier], config: &InferenceConfig) -> Result<TaskPrediction> {
    if models.is_empty() {
        return Err(Error::Usage("task prediction needs at least one task model".into()));
    }
    config.validate()?;
    let views = augment_views(image, &config.views())?;
    let mut batch: Vec<&Tensor<f32>> = Vec::with_capacity(views.len() + 1);
    batch.push(image);
    batch.extend(views.iter());
    let normalize = use_normalization(models, config);

    let mut scores = Vec::with_capacity(models.len());
    let mut averaged = Vec::with_capacity(models.len());
    let mut unaugmented = Vec::with_capacity(models.len());
    for model in models {
        let logits = model.logits_batch(&batch)?;
        let p0 = softmax(&logits[0]);
        let mut mean = vec![0.0; p0.len()];
        for l in &logits[1..] {
            for (m, p) in mean.iter_mut().zip(softmax(l)) {
                *m += p;
            }
        }
        let nviews = (logits.len() - 1) as f64;
        mean.iter_mut().for_each(|m| *m /= nviews);
        scores.push(blended_score(&mean, &p0, config.beta, normalize)?);
        averaged.push(mean);
        unaugmented.push(p0);
    }
    let chosen = choose(&scores, models);
    Ok(TaskPrediction {
        task_id: models[chosen].task_id(),
        scores,
        chosen,
        averaged,
        unaugmented,
    })
}

/// Class-incremental prediction: infer the task, then classify with that task's model.
pub fn classify(image: &Tensor<f32>, models: &[&dyn TaskClassifier], config: &InferenceConfig) -> Result<(usize, usize)> {
    let pred = predict_task(image, models, config)?;
    Ok((pred.task_id, pred.label(models)))
}

/// Task-incremental prediction: the task is given, no augmentation involved.
pub fn classify_known_task(image: &Tensor<f32>, model: &dyn TaskClassifier) -> Result<usize> {
    let logits = model.logits_batch(&[image])?;
    Ok(model.classes()[argmax(&logits[0])])
}

#[cfg(test)]
mod tests;
