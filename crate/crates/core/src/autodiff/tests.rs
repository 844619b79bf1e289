use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

/// Step for polynomial checks, where central differences are exact up to rounding.
const EPS: f64 = 1e-3;
/// Step for everything else; at 1e-3 the O(eps²) truncation term alone
/// exceeds the tolerance on layernorm coordinates with small gradients.
const EPS_SMOOTH: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar loss
/// whose gradient exercises every output coordinate.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = tape.constant(rand_tensor(tape.value(out).shape(), &mut rng));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, Error>, inputs: &[Tensor<f64>]) {
    let report = grad_check_many(f, inputs, EPS_SMOOTH, TOL).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn matmul_examples() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(a.clone());
    let i = tape.constant(Tensor::eye(2));
    let out = tape.matmul(av, i).unwrap();
    assert_eq!(tape.value(out), &a);
    let col = tape.constant(Tensor::from_rows(&[&[5.0], &[6.0]]));
    let out = tape.matmul(av, col).unwrap();
    assert_eq!(tape.value(out).data(), &[17.0, 39.0]);
    let wrong = tape.constant(Tensor::zeros([3, 1]));
    match tape.matmul(av, wrong) {
        Err(Error::Shape { lhs, rhs, .. }) => assert_eq!((lhs, rhs), (vec![2, 2], vec![3, 1])),
        other => panic!("{other:?}"),
    }
}

#[test]
fn conv2d_same_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = rand_tensor(&[4, 6], &mut rng);
    let mut tape = Tape::<f64>::new();
    let wv = tape.constant(w.clone());
    let delta = tape.constant(Tensor::from_fn([3, 3], |i| if i == 4 { 1.0 } else { 0.0 }));
    let out = tape.conv2d_same(wv, delta).unwrap();
    assert_eq!(tape.value(out), &w);
    let zero = tape.constant(Tensor::zeros([5, 5]));
    let out = tape.conv2d_same(wv, zero).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

    let small = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let ones = tape.constant(Tensor::ones([3, 3]));
    let out = tape.conv2d_same(small, ones).unwrap();
    assert_eq!(tape.value(out).data(), &[10.0; 4]);

    let even = tape.constant(Tensor::ones([2, 2]));
    assert!(matches!(tape.conv2d_same(small, even), Err(Error::Config(_))));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    let x = tape.constant(Tensor::new([2], vec![1f64.ln(), 3f64.ln()]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.value(y)[0] - 0.25).abs() < 1e-12 && (tape.value(y)[1] - 0.75).abs() < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let g = tape.constant(Tensor::ones([3]));
    let b = tape.constant(Tensor::zeros([3]));
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    let expect = [-1.224744871391589, 0.0, 1.224744871391589];
    for (a, e) in tape.value(y).data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-9);
    }
    let c = tape.constant(Tensor::full([2, 3], 7.0));
    let beta = tape.constant(Tensor::new([3], vec![0.1, -0.2, 0.3]).unwrap());
    let y = tape.layer_norm(c, g, beta, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
    let g4 = tape.constant(Tensor::ones([4]));
    assert!(matches!(tape.layer_norm(x, g4, b, 1e-5), Err(Error::Shape { .. })));
}

#[test]
fn activation_examples() {
    assert_eq!(kernels::gelu(0.0f64), 0.0);
    assert_eq!(kernels::sigmoid(0.0f64), 0.5);
    for x in [-30.0, -2.5, -0.1, 0.0, 0.7, 4.0, 30.0f64] {
        assert!((kernels::sigmoid(x) + kernels::sigmoid(-x) - 1.0).abs() < 1e-12);
    }
    assert!((kernels::gelu(3.0f64) - 2.99595).abs() < 1e-4);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([1, 2]));
    let l = tape.cross_entropy(z, &[0]).unwrap();
    assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-12);
    let sure = tape.constant(Tensor::new([1, 3], vec![30.0, 0.0, 0.0]).unwrap());
    let l = tape.cross_entropy(sure, &[0]).unwrap();
    assert!(tape.value(l)[0] <= 1e-9);
    match tape.cross_entropy(z, &[2]) {
        Err(Error::Data(m)) => assert!(m.contains("index 0"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn backward_accumulates_and_runs_once() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 3]);
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let (a, b) = (tape.sum(x), tape.sum(x));
    let s = tape.add(a, b).unwrap();
    let unused = tape.param(Tensor::ones([2]));
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 3]);
    assert!(tape.grad(unused).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones([2]));
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
}

#[test]
fn grad_check_examples() {
    let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let v = tape.param(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    for (g, e) in tape.grad(v).unwrap().data().iter().zip([2.0, 4.0, 6.0]) {
        assert!((g - e).abs() <= 1e-8);
    }
    let r = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        EPS,
        1e-8,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");

    // constant function: analytic and numeric gradients both vanish
    let r = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, EPS, 1e-12).unwrap();
    assert_eq!(r.max_rel_err, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, w) = (rand_tensor(&[3, 3], &mut rng), rand_tensor(&[3, 3], &mut rng));
    check(
        |t, v| {
            let logits = t.matmul(v[0], v[1])?;
            t.cross_entropy(logits, &[0, 2, 1])
        },
        &[a, w],
    );

    let stochastic = grad_check(
        |t, v| {
            let d = t.dropout(v, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
            Ok(t.sum(d))
        },
        &x,
        EPS,
        TOL,
    );
    assert!(matches!(stochastic, Err(Error::Usage(_))));
}

#[test]
fn dropout_with_zero_rate_is_identity() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = tape.dropout(x, 0.0, &mut rng);
    let z = tape.drop_path(y, 0.0, &mut rng);
    assert_eq!(tape.value(z).data(), &[1.0, 2.0, 3.0]);
    assert!(!tape.is_stochastic());
}

#[test]
fn dropout_keeps_expectation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones([20_000]));
    let y = tape.dropout(x, 0.25, &mut ChaCha8Rng::seed_from_u64(9));
    let mean = tape.value(y).sum() / 20_000.0;
    assert!((mean - 1.0).abs() < 0.03, "{mean}");
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn softmax_slices_sum_to_one_and_shift(seed in any::<u64>(), shift in -50.0f64..50.0, axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[3, 5], &mut rng).map(|v| v * 20.0);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let y = tape.softmax(xv, axis).unwrap();
        let xs = tape.constant(x.map(|v| v + shift));
        let ys = tape.softmax(xs, axis).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) < 1e-6);
        let yv = tape.value(y);
        if axis == 1 {
            for r in 0..3 {
                prop_assert!(((0..5).map(|c| yv.at(r, c)).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        } else {
            for c in 0..5 {
                prop_assert!(((0..3).map(|r| yv.at(r, c)).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grad_matmul(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(|t, v| { let o = t.matmul(v[0], v[1])?; project(t, o, seed) },
            &[rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4, 2], &mut rng)]);
    }

    #[test]
    fn grad_conv2d_same(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(|t, v| { let o = t.conv2d_same(v[0], v[1])?; project(t, o, seed) },
            &[rand_tensor(&[4, 6], &mut rng), rand_tensor(&[k, k], &mut rng)]);
    }

    #[test]
    fn grad_softmax(seed in any::<u64>(), axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(|t, v| { let o = t.softmax(v[0], axis)?; project(t, o, seed) }, &[rand_tensor(&[3, 5], &mut rng)]);
    }

    #[test]
    fn grad_layer_norm(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(|t, v| { let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?; project(t, o, seed) },
            &[rand_tensor(&[4, 8], &mut rng), rand_tensor(&[8], &mut rng), rand_tensor(&[8], &mut rng)]);
    }

    #[test]
    fn grad_activations(seed in any::<u64>(), kind in prop::sample::select(vec![Activation::Gelu, Activation::Sigmoid, Activation::Relu])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep ReLU inputs away from the kink
        let x = rand_tensor(&[12], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v } * 3.0);
        check(|t, v| { let o = t.activation(v[0], kind); project(t, o, seed) }, &[x]);
    }

    #[test]
    fn grad_cross_entropy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
        check(|t, v| t.cross_entropy(v[0], &labels), &[rand_tensor(&[4, 10], &mut rng).map(|v| v * 3.0)]);
    }

    #[test]
    fn grad_conv2d(seed in any::<u64>(), stride in 1usize..3, padding in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(|t, v| { let o = t.conv2d(v[0], v[1], v[2], stride, padding)?; project(t, o, seed) },
            &[rand_tensor(&[2, 6, 6], &mut rng), rand_tensor(&[3, 2, 3, 3], &mut rng), rand_tensor(&[3], &mut rng)]);
    }

    #[test]
    fn grad_max_pool(seed in any::<u64>()) {
        // distinct values 0.1 apart so a 1e-3 nudge never changes a window's winner
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vals: Vec<f64> = (0..50).map(|i| i as f64 * 0.1 - 2.5).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng);
        let x = Tensor::new([2, 5, 5], vals).unwrap();
        check(|t, v| { let o = t.max_pool2d(v[0], 3, 2, 1)?; project(t, o, seed) }, &[x]);
    }

    #[test]
    fn grad_structural_ops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(|t, v| {
            let tr = t.transpose(v[0])?;
            let cat = t.concat(&[tr, v[1]], 0)?;
            let biased = t.add_row_bias(cat, v[2])?;
            let s = t.mean(v[3]);
            let scaled = t.scale_by(s, biased)?;
            let flat = t.reshape(scaled, [15])?;
            let half = t.scale(flat, 0.5);
            let diff = t.sub(half, flat)?;
            project(t, diff, seed)
        }, &[rand_tensor(&[3, 2], &mut rng), rand_tensor(&[3, 3], &mut rng), rand_tensor(&[3], &mut rng), rand_tensor(&[2], &mut rng)]);
    }
}

