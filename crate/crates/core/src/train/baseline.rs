use crate::adapter::TaskModel;
use crate::data::{Dataset, TaskSplit};
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelConfig};
use crate::train::eval::accuracy;
use crate::train::trainer::{fit, BackboneLearner, TaskData};
use crate::train::TrainConfig;

/// Accuracy matrix of sequential fine-tuning, laid out like an `EvalReport`.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveReport {
    pub a: Vec<Vec<f64>>,
}

impl NaiveReport {
    /// Task-1 accuracy after each stage.
    pub fn first_task_curve(&self) -> Vec<f64> {
        self.a.iter().map(|r| r[0]).collect()
    }
}

/// Fine-tune one unfrozen model on every task in turn, sharing a single head
/// over task-local labels, so nothing is added per task.
pub fn naive_finetune(
    config: ModelConfig,
    split: &TaskSplit,
    train: &Dataset,
    test: &Dataset,
    num_tasks: usize,
    train_config: &TrainConfig,
) -> Result<NaiveReport> {
    if num_tasks == 0 || num_tasks > split.num_tasks() {
        return Err(Error::Config(format!("cannot run {num_tasks} of {} tasks", split.num_tasks())));
    }
    let width = split.classes[0].len();
    if split.classes.iter().any(|c| c.len() != width) {
        return Err(Error::Config("a shared head needs equal task widths".into()));
    }
    let mut model = Backbone::new(config, split.classes[0].clone(), train_config.seed)?;
    model.stats = train.channel_stats(&split.train[0])?;
    let mut a = Vec::with_capacity(num_tasks);
    for stage in 0..num_tasks {
        let data = TaskData {
            dataset: train,
            indices: &split.train[stage],
            classes: &split.classes[stage],
        };
        model.classes = split.classes[stage].clone();
        let wd = train_config.weight_decay_base;
        fit(&mut BackboneLearner(&mut model), data, train_config, wd, 100 + stage as u64, &mut |_| {})?;
        let mut row = Vec::with_capacity(stage + 1);
        for t in 0..=stage {
            let mut view = TaskModel::base(&model);
            view.classes = split.classes[t].clone();
            row.push(accuracy(&view, test, &split.test[t])?);
        }
        a.push(row);
    }
    Ok(NaiveReport { a })
}
