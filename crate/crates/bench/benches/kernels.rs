use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use contracon::adapter::adapt_weight;
use contracon::model::ImageShape;
use contracon::{Backbone, GateMode, ModelConfig, Tape, Tensor};

fn filled(shape: &[usize], salt: u32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| ((i as u32).wrapping_mul(2654435761).wrapping_add(salt) % 1000) as f32 / 1000.0 - 0.5)
}

fn matmul(c: &mut Criterion) {
    let a = filled(&[81, 64], 1);
    let b = filled(&[64, 128], 2);
    c.bench_function("matmul 81x64x128", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
            black_box(tape.matmul(x, y).unwrap());
        })
    });
}

fn conv_same(c: &mut Criterion) {
    let w = filled(&[256, 64], 3);
    let f = filled(&[15, 15], 4);
    c.bench_function("conv2d_same 256x64 k15", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (x, k) = (tape.constant(w.clone()), tape.constant(f.clone()));
            black_box(tape.conv2d_same(x, k).unwrap());
        })
    });
    c.bench_function("adapt_weight 256x64 k15", |bench| {
        bench.iter(|| black_box(adapt_weight(&w, &f, 0.3, GateMode::Learnable).unwrap()))
    });
}

fn forward(c: &mut Criterion) {
    let image = ImageShape {
        channels: 1,
        height: 16,
        width: 16,
    };
    let model = Backbone::<f32>::new(ModelConfig::tiny(64, 2, 2, image, 2), vec![0, 1], 0).unwrap();
    let x = filled(&[1, 16, 16], 5).map(|v| v + 0.5);
    c.bench_function("tiny forward 16x16", |bench| bench.iter(|| black_box(model.forward_logits(&x).unwrap())));
}

criterion_group!(benches, matmul, conv_same, forward);
criterion_main!(benches);
