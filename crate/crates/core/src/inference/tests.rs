use proptest::prelude::*;

use super::*;

/// Returns fixed log-probabilities: `original` for the first image of a
/// batch, then `views` cycled for the rest.
struct Mock {
    task: usize,
    classes: Vec<usize>,
    original: Vec<f64>,
    views: Vec<Vec<f64>>,
}

impl Mock {
    fn new(task: usize, classes: Vec<usize>, original: &[f64], views: &[&[f64]]) -> Self {
        Mock {
            task,
            classes,
            original: original.iter().map(|p| p.ln()).collect(),
            views: views.iter().map(|v| v.iter().map(|p| p.ln()).collect()).collect(),
        }
    }

    fn constant(task: usize, classes: Vec<usize>, p: &[f64]) -> Self {
        Mock::new(task, classes, p, &[p])
    }
}

impl TaskClassifier for Mock {
    fn task_id(&self) -> usize {
        self.task
    }

    fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn logits_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        Ok((0..images.len())
            .map(|i| if i == 0 { self.original.clone() } else { self.views[(i - 1) % self.views.len()].clone() })
            .collect())
    }
}

fn image() -> Tensor<f32> {
    Tensor::from_fn([1, 8, 8], |i| (i % 7) as f32 / 7.0)
}

fn config(beta: f64) -> InferenceConfig {
    InferenceConfig {
        beta,
        ..InferenceConfig::default()
    }
}

#[test]
fn entropy_examples() {
    let uniform = vec![0.1; 10];
    assert!((entropy(&uniform, false).unwrap() - 10f64.ln()).abs() < 1e-12);
    assert!((entropy(&uniform, true).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(entropy(&[0.0, 1.0, 0.0], false).unwrap(), 0.0);
    assert!((entropy(&[0.5, 0.25, 0.25], false).unwrap() - 1.039721).abs() < 1e-6);
    assert!((entropy(&[0.9, 0.1], false).unwrap() - 0.325083).abs() < 1e-6);
}

#[test]
fn entropy_rejects_bad_distributions() {
    assert!(matches!(entropy(&[0.5, 0.6], false), Err(Error::Data(_))));
    assert!(matches!(entropy(&[1.2, -0.2], false), Err(Error::Data(_))));
    assert!(matches!(entropy(&[], false), Err(Error::Data(_))));
    assert!(entropy(&[0.5, 0.5 + 5e-6], false).is_ok());
}

#[test]
fn single_model_always_chosen() {
    let m = Mock::constant(3, vec![4, 5], &[0.5, 0.5]);
    let models: [&dyn TaskClassifier; 1] = [&m];
    for beta in [0.0, 0.6, 1.0] {
        assert_eq!(predict_task(&image(), &models, &config(beta)).unwrap().task_id, 3);
    }
    assert!(matches!(predict_task(&image(), &[], &config(0.6)), Err(Error::Usage(_))));
}

#[test]
fn consistent_model_beats_inconsistent_one() {
    let a = Mock::constant(1, vec![0, 1], &[0.9, 0.1]);
    let b = Mock::new(2, vec![2, 3], &[0.9, 0.1], &[&[0.9, 0.1], &[0.1, 0.9]]);
    let models: [&dyn TaskClassifier; 2] = [&a, &b];
    for beta in [0.0, 0.3, 0.6, 1.0] {
        let pred = predict_task(&image(), &models, &config(beta)).unwrap();
        assert_eq!(pred.task_id, 1, "beta {beta}");
        assert!((entropy(&pred.averaged[0], false).unwrap() - 0.325083).abs() < 1e-6);
        assert!((entropy(&pred.averaged[1], false).unwrap() - 2f64.ln()).abs() < 1e-9);
    }
    // the two models tie on the original image, so β = 0 falls back to the lower id
    let swapped: [&dyn TaskClassifier; 2] = [&b, &a];
    assert_eq!(predict_task(&image(), &swapped, &config(0.0)).unwrap().task_id, 1);
    assert_eq!(predict_task(&image(), &swapped, &config(0.6)).unwrap().chosen, 1);
}

#[test]
fn beta_zero_ignores_views() {
    // a: confident on the original only; b: confident on the views only
    let a = Mock::new(1, vec![0, 1], &[0.99, 0.01], &[&[0.5, 0.5]]);
    let b = Mock::new(2, vec![2, 3], &[0.6, 0.4], &[&[0.99, 0.01]]);
    let models: [&dyn TaskClassifier; 2] = [&a, &b];
    let p0 = predict_task(&image(), &models, &config(0.0)).unwrap();
    assert_eq!(p0.task_id, 1);
    assert!((p0.scores[0] - entropy(&[0.99, 0.01], false).unwrap()).abs() < 1e-9);
    assert_eq!(predict_task(&image(), &models, &config(1.0)).unwrap().task_id, 2);
}

#[test]
fn ties_go_to_lowest_task_id() {
    let p = [0.7, 0.2, 0.1];
    let m5 = Mock::constant(5, vec![10, 11, 12], &p);
    let m2 = Mock::constant(2, vec![3, 4, 5], &p);
    let m9 = Mock::constant(9, vec![0, 1, 2], &p);
    let models: [&dyn TaskClassifier; 3] = [&m5, &m2, &m9];
    let pred = predict_task(&image(), &models, &config(0.6)).unwrap();
    assert_eq!((pred.task_id, pred.chosen), (2, 1));
    assert_eq!(pred.label(&models), 3);
}

#[test]
fn label_comes_from_the_chosen_model() {
    let a = Mock::constant(1, vec![0, 1], &[0.6, 0.4]);
    let b = Mock::constant(2, vec![7, 8], &[0.02, 0.98]);
    let models: [&dyn TaskClassifier; 2] = [&a, &b];
    assert_eq!(classify(&image(), &models, &config(0.6)).unwrap(), (2, 8));
    assert_eq!(classify_known_task(&image(), &a).unwrap(), 0);
}

#[test]
fn normalization_is_automatic_for_uneven_tasks() {
    // two-way model at ln 2, five-way model at 0.9·ln 5: raw favors the first, normalized the second
    let a = Mock::constant(1, vec![0, 1], &[0.5, 0.5]);
    let mut q = [0.0; 5];
    q[0] = 0.6;
    q[1..].iter_mut().for_each(|v| *v = 0.1);
    let b = Mock::constant(2, vec![2, 3, 4, 5, 6], &q);
    let models: [&dyn TaskClassifier; 2] = [&a, &b];
    assert!(entropy(&q, false).unwrap() > 2f64.ln());
    assert_eq!(predict_task(&image(), &models, &config(0.6)).unwrap().task_id, 2);
    let raw = InferenceConfig {
        normalize_entropy: Some(false),
        ..config(0.6)
    };
    assert_eq!(predict_task(&image(), &models, &raw).unwrap().task_id, 1);
}

#[test]
fn restrict_matches_fewer_models() {
    let a = Mock::new(1, vec![0, 1], &[0.8, 0.2], &[&[0.7, 0.3], &[0.6, 0.4]]);
    let b = Mock::new(2, vec![2, 3], &[0.95, 0.05], &[&[0.9, 0.1]]);
    let c = Mock::constant(3, vec![4, 5], &[0.99, 0.01]);
    let all: [&dyn TaskClassifier; 3] = [&a, &b, &c];
    let cfg = config(0.6);
    let full = predict_task(&image(), &all, &cfg).unwrap();
    for count in 1..=3 {
        let direct = predict_task(&image(), &all[..count], &cfg).unwrap();
        assert_eq!(full.restrict(&all, count, &cfg).unwrap(), direct);
    }
    assert!(full.restrict(&all, 0, &cfg).is_err());
}

#[test]
fn invalid_config_is_rejected() {
    let m = Mock::constant(1, vec![0, 1], &[0.5, 0.5]);
    let models: [&dyn TaskClassifier; 1] = [&m];
    for bad in [
        config(1.5),
        InferenceConfig {
            num_augmentations: 0,
            ..config(0.6)
        },
    ] {
        assert!(matches!(predict_task(&image(), &models, &bad), Err(Error::Config(_))));
    }
    let bright = Tensor::from_fn([1, 4, 4], |_| 1.5f32);
    assert!(matches!(predict_task(&bright, &models, &config(0.6)), Err(Error::Data(_))));
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter("non-zero", |v| v.iter().sum::<f64>() > 1e-3).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_within_bounds(p in (2usize..12).prop_flat_map(distribution)) {
        let h = entropy(&p, false).unwrap();
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
        let n = entropy(&p, true).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
    }

    #[test]
    fn scaling_scores_keeps_argmin(
        dists in prop::collection::vec(distribution(4), 2..6),
        beta in 0.0f64..=1.0,
        scale in 0.01f64..100.0,
    ) {
        let mocks: Vec<Mock> = dists
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let d: Vec<f64> = d.iter().map(|x| x.max(1e-12)).collect();
                Mock::constant(i + 1, vec![4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3], &d)
            })
            .collect();
        let models: Vec<&dyn TaskClassifier> = mocks.iter().map(|m| m as &dyn TaskClassifier).collect();
        let pred = predict_task(&image(), &models, &config(beta)).unwrap();
        let scaled: Vec<f64> = pred.scores.iter().map(|s| s * scale).collect();
        prop_assert_eq!(choose(&scaled, &models), pred.chosen);
        prop_assert_eq!(pred.task_id, models[pred.chosen].task_id());
        for s in &pred.scores {
            prop_assert!(*s >= pred.scores[pred.chosen]);
        }
    }

    #[test]
    fn consistent_model_dominates(
        q in distribution(3),
        beta in 0.01f64..=1.0,
        shift in 1usize..3,
    ) {
        let q: Vec<f64> = q.iter().map(|x| 0.05 + 0.85 * x).collect();
        let s: f64 = q.iter().sum();
        let q: Vec<f64> = q.iter().map(|x| x / s).collect();
        let rotated: Vec<f64> = (0..3).map(|i| q[(i + shift) % 3]).collect();
        prop_assume!(q.iter().zip(&rotated).any(|(a, b)| (a - b).abs() > 1e-3));
        let steady = Mock::constant(4, vec![0, 1, 2], &q);
        let shaky = Mock::new(1, vec![3, 4, 5], &q, &[&q, &rotated]);
        let models: [&dyn TaskClassifier; 2] = [&shaky, &steady];
        prop_assert_eq!(predict_task(&image(), &models, &config(beta)).unwrap().task_id, 4);
    }

    #[test]
    fn prediction_is_deterministic(seed in 0u64..1000) {
        let a = Mock::new(1, vec![0, 1], &[0.8, 0.2], &[&[0.7, 0.3], &[0.6, 0.4]]);
        let b = Mock::new(2, vec![2, 3], &[0.6, 0.4], &[&[0.9, 0.1]]);
        let models: [&dyn TaskClassifier; 2] = [&a, &b];
        let cfg = InferenceConfig { num_augmentations: 5, seed, ..config(0.6) };
        prop_assert_eq!(predict_task(&image(), &models, &cfg).unwrap(), predict_task(&image(), &models, &cfg).unwrap());
    }
}
