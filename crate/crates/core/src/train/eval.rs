use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{TaskAdapter, TaskModel};
use crate::data::{Dataset, TaskSplit};
use crate::error::{Error, Result};
use crate::inference::{classify_known_task, predict_task, InferenceConfig, TaskClassifier};
use crate::model::Backbone;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Task identity given at test time.
    Til,
    /// Task identity inferred at test time.
    Cil,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Til => "til",
            EvalMode::Cil => "cil",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "til" => Ok(EvalMode::Til),
            "cil" => Ok(EvalMode::Cil),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

/// Mean of per-task accuracies; `None` for an empty row.
pub fn average_accuracy(row: &[f64]) -> Option<f64> {
    (!row.is_empty()).then(|| row.iter().sum::<f64>() / row.len() as f64)
}

/// `a[T-1][t-1]`: accuracy on task `t` after training stage `T`, for `t <= T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub a: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn stages(&self) -> usize {
        self.a.len()
    }

    /// `A_T` for the 1-based stage `stage`.
    pub fn average(&self, stage: usize) -> Option<f64> {
        stage.checked_sub(1).and_then(|i| self.a.get(i)).and_then(|r| average_accuracy(r))
    }

    pub fn averages(&self) -> Vec<f64> {
        self.a.iter().filter_map(|r| average_accuracy(r)).collect()
    }

    pub fn final_average(&self) -> Option<f64> {
        self.average(self.stages())
    }

    /// One record per `(T, t)` followed by one `A_T` summary line per stage.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, row) in self.a.iter().enumerate() {
            for (j, acc) in row.iter().enumerate() {
                let _ = writeln!(s, "T={} t={} mode={} accuracy={acc}", i + 1, j + 1, self.mode);
            }
        }
        for (i, avg) in self.averages().into_iter().enumerate() {
            let _ = writeln!(s, "A_T mode={} T={} value={avg}", self.mode, i + 1);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Task models for tasks `1..=adapters.len() + 1`; adapters may arrive in any order
/// but must cover `2..=n` exactly.
pub fn task_models<'a>(backbone: &'a Backbone<f32>, adapters: &[TaskAdapter<f32>]) -> Result<Vec<TaskModel<'a, f32>>> {
    let mut sorted: Vec<&TaskAdapter<f32>> = adapters.iter().collect();
    sorted.sort_by_key(|a| a.task_id);
    let mut models = vec![TaskModel::base(backbone)];
    for (i, a) in sorted.into_iter().enumerate() {
        if a.task_id != i + 2 {
            return Err(Error::Config(format!("missing adapter for task {} (found task {})", i + 2, a.task_id)));
        }
        models.push(TaskModel::materialize(backbone, a)?);
    }
    Ok(models)
}

/// Known-task accuracy of `model` over `indices`.
pub fn accuracy(model: &dyn TaskClassifier, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data("accuracy over zero samples".into()));
    }
    let mut hits = 0;
    for &i in indices {
        if classify_known_task(&data.images[i], model)? == data.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Fill `a[T][t]` for every stage `T <= models.len()`. `models[t-1]` serves task `t`.
pub fn evaluate(
    models: &[TaskModel<'_, f32>],
    split: &TaskSplit,
    test: &Dataset,
    mode: EvalMode,
    inference: &InferenceConfig,
) -> Result<EvalReport> {
    let n = models.len();
    if n == 0 {
        return Err(Error::Usage("nothing to evaluate".into()));
    }
    if n > split.num_tasks() {
        return Err(Error::Config(format!("{n} task models but only {} tasks in the split", split.num_tasks())));
    }
    for (t, m) in models.iter().enumerate() {
        if m.task_id != t + 1 || m.classes != split.classes[t] {
            return Err(Error::ConfigMismatch(format!(
                "model for task {} covers classes {:?}, split expects {:?}",
                m.task_id, m.classes, split.classes[t]
            )));
        }
    }
    let a = match mode {
        EvalMode::Til => {
            let acc = models
                .iter()
                .enumerate()
                .map(|(t, m)| accuracy(m, test, &split.test[t]))
                .collect::<Result<Vec<_>>>()?;
            (1..=n).map(|stage| acc[..stage].to_vec()).collect()
        }
        EvalMode::Cil => {
            inference.validate()?;
            let dyn_models: Vec<&dyn TaskClassifier> = models.iter().map(|m| m as &dyn TaskClassifier).collect();
            // hits[T-1][t-1]
            let mut hits = vec![vec![0usize; n]; n];
            for t in 0..n {
                if split.test[t].is_empty() {
                    return Err(Error::Data(format!("task {} has no test samples", t + 1)));
                }
                for &i in &split.test[t] {
                    let full = predict_task(&test.images[i], &dyn_models, inference)?;
                    for stage in t + 1..=n {
                        let pred = if stage == n {
                            full.clone()
                        } else {
                            full.restrict(&dyn_models, stage, inference)?
                        };
                        if pred.label(&dyn_models[..stage]) == test.labels[i] {
                            hits[stage - 1][t] += 1;
                        }
                    }
                }
            }
            (0..n)
                .map(|s| (0..=s).map(|t| hits[s][t] as f64 / split.test[t].len() as f64).collect())
                .collect()
        }
    };
    Ok(EvalReport { mode, a })
}
