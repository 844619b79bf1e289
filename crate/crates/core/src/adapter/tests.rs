use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_many;
use crate::model::{ImageShape, Pass};

/// Plain nested-loop same-padded cross-correlation.
fn oracle_conv(w: &[f64], rows: usize, cols: usize, f: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows as isize {
        for j in 0..cols as isize {
            let mut acc = 0.0;
            for a in -r..=r {
                for b in -r..=r {
                    let (y, x) = (i + a, j + b);
                    if y >= 0 && y < rows as isize && x >= 0 && x < cols as isize {
                        acc += w[(y * cols as isize + x) as usize] * f[((a + r) * k as isize + (b + r)) as usize];
                    }
                }
            }
            out[(i * cols as isize + j) as usize] = acc;
        }
    }
    out
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn tiny(image: usize) -> ModelConfig {
    let shape = ImageShape {
        channels: 1,
        height: image,
        width: image,
    };
    ModelConfig::tiny(16, 2, 2, shape, 3)
}

fn frozen(config: ModelConfig, seed: u64) -> Backbone<f64> {
    let classes = (0..config.classes_first_task).collect();
    let mut b = Backbone::new(config, classes, seed).unwrap();
    b.freeze();
    b
}

#[test]
fn adapt_weight_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = rand_tensor(&[4, 3], &mut rng);
    let half = adapt_weight(&w, &Tensor::zeros([3, 3]), 0.0, GateMode::Learnable).unwrap();
    assert!(half.max_abs_diff(&w.map(|v| 0.5 * v)) < 1e-15);
    let delta = Tensor::from_fn([3, 3], |i| if i == 4 { 1.0 } else { 0.0 });
    for alpha in [-2.0, 0.0, 1.3] {
        let out = adapt_weight(&w, &delta, alpha, GateMode::Learnable).unwrap();
        let g = kernels::sigmoid(alpha);
        assert!(out.max_abs_diff(&w.map(|v| (1.0 + g) * v)) < 1e-15);
    }
    let f = rand_tensor(&[3, 3], &mut rng);
    let out = adapt_weight(&w, &f, 0.7, GateMode::Learnable).unwrap();
    let conv = oracle_conv(w.data(), 4, 3, f.data(), 3);
    let g = 1.0 / (1.0 + (-0.7f64).exp());
    for ((o, c), wv) in out.data().iter().zip(conv).zip(w.data()) {
        assert!((o - (c + g * wv)).abs() <= 1e-6);
    }
}

#[test]
fn oracle_equivalence_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..200 {
        let k: usize = [1, 3, 5, 7][case % 4];
        let lo = (k / 2).max(1);
        let (rows, cols) = (rng.random_range(lo..lo + 9), rng.random_range(lo..lo + 9));
        let w = rand_tensor(&[rows, cols], &mut rng);
        let f = rand_tensor(&[k, k], &mut rng);
        let alpha = rng.random_range(-5.0..5.0);
        let conv = oracle_conv(w.data(), rows, cols, f.data(), k);
        for (mode, g) in [
            (GateMode::Learnable, 1.0 / (1.0 + (-alpha as f64).exp())),
            (GateMode::AlwaysOn, 1.0),
            (GateMode::Off, 0.0),
        ] {
            let out = adapt_weight(&w, &f, alpha, mode).unwrap();
            for ((o, c), wv) in out.data().iter().zip(&conv).zip(w.data()) {
                assert!((o - (c + g * wv)).abs() <= 1e-6, "case {case} {mode:?}");
            }
        }
        // off is exactly W′, always-on exactly W′ + W
        let off = adapt_weight(&w, &f, alpha, GateMode::Off).unwrap();
        let on = adapt_weight(&w, &f, alpha, GateMode::AlwaysOn).unwrap();
        let mut tape = Tape::new();
        let (wv, fv) = (tape.constant(w.clone()), tape.constant(f.clone()));
        let conv_only = tape.conv2d_same(wv, fv).unwrap();
        assert_eq!(&off, tape.value(conv_only));
        let sum = tape.add(conv_only, wv).unwrap();
        assert_eq!(&on, tape.value(sum));
    }
}

#[test]
fn very_negative_alpha_matches_gate_off() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&[6, 4], &mut rng);
    let f = rand_tensor(&[3, 3], &mut rng);
    let off = adapt_weight(&w, &f, 0.0, GateMode::Off).unwrap();
    let low = adapt_weight(&w, &f, -30.0, GateMode::Learnable).unwrap();
    assert!(off.max_abs_diff(&low) <= 1e-6);
}

#[test]
fn gradients_reach_kernel_and_gate_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = rand_tensor(&[5, 4], &mut rng);
    let r = rand_tensor(&[5, 4], &mut rng);
    let inputs = [rand_tensor(&[3, 3], &mut rng), Tensor::scalar(0.3)];
    let report = grad_check_many(
        |t, v| {
            let wv = t.constant(w.clone());
            let out = adapt_weight_on(t, wv, v[0], v[1], GateMode::Learnable)?;
            let rv = t.constant(r.clone());
            let p = t.mul(out, rv)?;
            Ok(t.sum(p))
        },
        &inputs,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");

    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let fv = tape.param(inputs[0].clone());
    let av = tape.param(Tensor::scalar(0.3));
    let out = adapt_weight_on(&mut tape, wv, fv, av, GateMode::Learnable).unwrap();
    let s = tape.sum(out);
    tape.backward(s).unwrap();
    assert!(tape.grad(wv).is_none());
    assert!(tape.grad(fv).is_some() && tape.grad(av).is_some());
}

#[test]
fn init_requires_frozen_odd_kernel() {
    let config = tiny(8);
    let open = Backbone::<f64>::new(config.clone(), vec![0, 1, 2], 1).unwrap();
    assert!(matches!(
        TaskAdapter::init(&open, 2, vec![3, 4], 3, GateMode::Learnable, 0),
        Err(Error::Usage(_))
    ));
    let b = frozen(config, 1);
    assert!(matches!(
        TaskAdapter::init(&b, 2, vec![3, 4], 4, GateMode::Learnable, 0),
        Err(Error::Config(_))
    ));
    let a = TaskAdapter::init(&b, 2, vec![3, 4], 5, GateMode::Learnable, 0).unwrap();
    let center = &a.kernels[0][0][0];
    assert_eq!(center[12], 0.5);
    assert_eq!(center.sum(), 0.5);
    assert!(a.gates.iter().flatten().flatten().all(|g| g[0] == 0.0));
    assert_eq!(a.task.norms, b.task.norms);
    assert_eq!(a.task.final_norm, b.task.final_norm);
}

#[test]
fn same_seed_same_adapter() {
    let b = frozen(tiny(8), 2);
    let a1 = TaskAdapter::init(&b, 2, vec![3, 4], 3, GateMode::Learnable, 9).unwrap();
    let a2 = TaskAdapter::init(&b, 2, vec![3, 4], 3, GateMode::Learnable, 9).unwrap();
    let a3 = TaskAdapter::init(&b, 2, vec![3, 4], 3, GateMode::Learnable, 10).unwrap();
    assert_eq!(a1.task.head_weight, a2.task.head_weight);
    assert_eq!(a1.digest(), a2.digest());
    assert_ne!(a1.task.head_weight, a3.task.head_weight);
}

#[test]
fn fresh_adapter_reproduces_base_features() {
    let b = frozen(tiny(12), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [GateMode::Learnable, GateMode::AlwaysOn, GateMode::Off] {
        let a = TaskAdapter::init(&b, 2, vec![3, 4], 7, mode, 1).unwrap();
        let m = TaskModel::materialize(&b, &a).unwrap();
        let base = TaskModel::base(&b);
        for (mh, bh) in m.attention.iter().flatten().zip(base.attention.iter().flatten()) {
            for (x, y) in mh.as_array().iter().zip(bh.as_array()) {
                assert!(x.max_abs_diff(y) <= 1e-12);
            }
        }
        let images: Vec<Tensor<f64>> = (0..20)
            .map(|_| Tensor::from_fn([1, 12, 12], |_| rng.random_range(0.0..1.0)))
            .collect();
        let refs: Vec<&Tensor<f64>> = images.iter().collect();
        for ((pa, _), (pb, _)) in m.eval_batch(&refs).unwrap().iter().zip(base.eval_batch(&refs).unwrap()) {
            assert!(pa.max_abs_diff(&pb) <= 1e-6, "{mode:?}");
        }
    }
}

#[test]
fn gate_off_materializes_convolution_only() {
    let b = frozen(tiny(8), 6);
    let mut a = TaskAdapter::init(&b, 2, vec![3, 4], 3, GateMode::Off, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in a.kernels.iter_mut().flatten().flatten() {
        *t = rand_tensor(&[3, 3], &mut rng);
    }
    let m = TaskModel::materialize(&b, &a).unwrap();
    let w = &b.attention[1][0].key;
    let f = &a.kernels[1][0][1];
    let conv = oracle_conv(w.data(), w.shape()[0], w.shape()[1], f.data(), 3);
    for (x, y) in m.attention[1][0].key.data().iter().zip(conv) {
        assert!((x - y).abs() <= 1e-12);
    }
    let again = TaskModel::materialize(&b, &a).unwrap();
    assert_eq!(m.attention, again.attention);
}

#[test]
fn bound_adapter_matches_materialized_model() {
    let b = frozen(tiny(8), 7);
    let mut a = TaskAdapter::init(&b, 2, vec![3, 4], 3, GateMode::Learnable, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in a.trainable_mut() {
        *t = t.map(|v| v + rng.random_range(-0.1..0.1));
    }
    let img = Tensor::from_fn([1, 8, 8], |_| rng.random_range(0.0..1.0));
    let mut tape = Tape::new();
    let (bound, _) = a.bind(&mut tape, &b, true).unwrap();
    let out = forward::forward_sample(&mut tape, &bound, &img, &mut Pass::Eval).unwrap();
    let direct = TaskModel::materialize(&b, &a).unwrap().eval_batch(&[&img]).unwrap();
    assert!(tape.value(out.logits).max_abs_diff(&direct[0].1) <= 1e-12);
}

#[test]
fn ledger_matches_enumeration() {
    for (d, l, h, k, c) in [(16, 2, 2, 3, 3), (16, 1, 4, 5, 2), (32, 3, 1, 1, 7), (8, 2, 2, 9, 2)] {
        let shape = ImageShape {
            channels: 1,
            height: 8,
            width: 8,
        };
        let b = frozen(ModelConfig::tiny(d, l, h, shape, 2), 1);
        let a = TaskAdapter::init(&b, 2, (10..10 + c).collect(), k, GateMode::Learnable, 0).unwrap();
        assert_eq!(a.num_trainable(), count_task_params(&b.config, k, c).total, "{d} {l} {h} {k} {c}");
    }
}

#[test]
fn mismatched_backbone_is_rejected() {
    let small = frozen(tiny(8), 1);
    let a = TaskAdapter::init(&small, 2, vec![3, 4], 3, GateMode::Learnable, 0).unwrap();
    let shape = ImageShape {
        channels: 1,
        height: 8,
        width: 8,
    };
    let wide = frozen(ModelConfig::tiny(32, 2, 2, shape, 3), 1);
    assert!(matches!(TaskModel::materialize(&wide, &a), Err(Error::ConfigMismatch(_))));
    assert!(matches!(a.check_compatible(&wide), Err(Error::ConfigMismatch(_))));
}

#[test]
fn adapter_training_leaves_backbone_untouched() {
    use crate::data::Dataset;
    use crate::train::{train_task, TaskData, TrainConfig};
    let mut b32 = Backbone::<f32>::new(tiny(8), vec![0, 1, 2], 3).unwrap();
    b32.freeze();
    let before = b32.digest();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = (0..8).map(|_| Tensor::from_fn([1, 8, 8], |_| rng.random_range(0.0..1.0))).collect();
    let data = Dataset::new(images, vec![3, 4, 3, 4, 3, 4, 3, 4], 5).unwrap();
    let mut a = TaskAdapter::init(&b32, 2, vec![3, 4], 3, GateMode::Learnable, 0).unwrap();
    let start = a.digest();
    let idx: Vec<usize> = (0..8).collect();
    let td = TaskData {
        dataset: &data,
        indices: &idx,
        classes: &[3, 4],
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train_task(&b32, &mut a, td, &cfg).unwrap();
    assert_eq!(b32.digest(), before);
    assert_ne!(a.digest(), start);
}
