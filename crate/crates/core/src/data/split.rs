use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskOrder {
    #[default]
    Given,
    Shuffled,
    Reversed,
}

impl FromStr for TaskOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "given" => Ok(TaskOrder::Given),
            "shuffled" => Ok(TaskOrder::Shuffled),
            "reversed" => Ok(TaskOrder::Reversed),
            other => Err(Error::Config(format!("unknown task order `{other}`"))),
        }
    }
}

/// Disjoint class sets per task, and the sample indices that fall in each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSplit {
    pub classes: Vec<Vec<usize>>,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub seed: u64,
    pub order: TaskOrder,
}

impl TaskSplit {
    pub fn num_tasks(&self) -> usize {
        self.classes.len()
    }

    /// Classes of the 1-based task `task_id`.
    pub fn task_classes(&self, task_id: usize) -> Result<&[usize]> {
        task_id
            .checked_sub(1)
            .and_then(|i| self.classes.get(i))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Usage(format!("task {task_id} outside 1..={}", self.classes.len())))
    }

    /// Position of a global label within its task's class list.
    pub fn local_label(&self, task_id: usize, global: usize) -> Result<usize> {
        self.task_classes(task_id)?
            .iter()
            .position(|&c| c == global)
            .ok_or_else(|| Error::Data(format!("class {global} is not part of task {task_id}")))
    }

    fn assign(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        let mut owner = vec![usize::MAX; dataset.num_classes.max(self.classes.iter().flatten().max().map_or(0, |m| m + 1))];
        for (t, cs) in self.classes.iter().enumerate() {
            for &c in cs {
                owner[c] = t;
            }
        }
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, &l) in dataset.labels.iter().enumerate() {
            if let Some(&t) = owner.get(l).filter(|&&t| t != usize::MAX) {
                out[t].push(i);
            }
        }
        out
    }
}

/// Partition the dataset's classes into `num_tasks` equal disjoint sets.
pub fn make_splits(train: &Dataset, test: &Dataset, num_tasks: usize, seed: u64, order: TaskOrder) -> Result<TaskSplit> {
    let n = train.num_classes;
    if num_tasks == 0 || !n.is_multiple_of(num_tasks) {
        return Err(Error::Config(format!("{n} classes cannot be split evenly into {num_tasks} tasks")));
    }
    if test.num_classes != n {
        return Err(Error::Config(format!(
            "train has {n} classes but test has {}",
            test.num_classes
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    if order == TaskOrder::Shuffled {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut classes: Vec<Vec<usize>> = perm.chunks(n / num_tasks).map(<[usize]>::to_vec).collect();
    if order == TaskOrder::Reversed {
        classes.reverse();
    }
    let mut split = TaskSplit {
        classes,
        train: Vec::new(),
        test: Vec::new(),
        seed,
        order,
    };
    split.train = split.assign(train);
    split.test = split.assign(test);
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn labelled(num_classes: usize, per_class: usize) -> Dataset {
        let labels: Vec<usize> = (0..num_classes * per_class).map(|i| i % num_classes).collect();
        let images = labels.iter().map(|_| Tensor::zeros([1, 2, 2])).collect();
        Dataset::new(images, labels, num_classes).unwrap()
    }

    #[test]
    fn hundred_classes_into_ten_tasks() {
        let ds = labelled(100, 1);
        let s = make_splits(&ds, &ds, 10, 3, TaskOrder::Shuffled).unwrap();
        assert_eq!(s.num_tasks(), 10);
        let mut all: Vec<usize> = s.classes.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, make_splits(&ds, &ds, 10, 3, TaskOrder::Shuffled).unwrap());
    }

    #[test]
    fn reversed_is_given_backwards() {
        let ds = labelled(10, 2);
        let g = make_splits(&ds, &ds, 5, 0, TaskOrder::Given).unwrap();
        let r = make_splits(&ds, &ds, 5, 0, TaskOrder::Reversed).unwrap();
        let mut rev = g.classes.clone();
        rev.reverse();
        assert_eq!(r.classes, rev);
        assert_eq!(g.classes[0], vec![0, 1]);
    }

    #[test]
    fn non_divisible_is_config_error() {
        let ds = labelled(10, 1);
        assert!(matches!(make_splits(&ds, &ds, 3, 0, TaskOrder::Given), Err(Error::Config(_))));
    }

    #[test]
    fn local_labels_follow_class_order() {
        let ds = labelled(4, 1);
        let s = make_splits(&ds, &ds, 2, 0, TaskOrder::Given).unwrap();
        assert_eq!(s.local_label(2, 3).unwrap(), 1);
        assert!(s.local_label(1, 3).is_err());
        assert!(s.task_classes(0).is_err());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_cover(per_task in 1usize..6, tasks in 1usize..8, seed in any::<u64>(), ord in 0u8..3) {
            let order = [TaskOrder::Given, TaskOrder::Shuffled, TaskOrder::Reversed][ord as usize];
            let ds = labelled(per_task * tasks, 3);
            let s = make_splits(&ds, &ds, tasks, seed, order).unwrap();
            let mut seen = vec![0usize; ds.num_classes];
            for cs in &s.classes {
                prop_assert_eq!(cs.len(), per_task);
                for &c in cs { seen[c] += 1; }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
            let mut samples = vec![0usize; ds.len()];
            for (t, idx) in s.train.iter().enumerate() {
                for &i in idx {
                    samples[i] += 1;
                    prop_assert!(s.classes[t].contains(&ds.labels[i]));
                }
            }
            prop_assert!(samples.iter().all(|&n| n == 1));
        }
    }
}
