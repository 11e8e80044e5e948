use criterion::{criterion_group, criterion_main, Criterion};

use dualtta::ndgrad::Axes;
use dualtta::tta::{Adapter, AdapterConfig, Method};
use dualtta::Tape;
use dualtta_bench::{images, model};

fn forward(c: &mut Criterion) {
    let m = model(0);
    let batch = images(64, 1);
    c.bench_function("forward_b64", |b| b.iter(|| m.forward(&batch, None).unwrap()));
}

fn conv(c: &mut Criterion) {
    let x = images(64, 2);
    let w = dualtta::RngStream::new(3).gaussian_tensor(&[8, 3, 3, 3]);
    c.bench_function("conv2d_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let y = tape.conv2d(xi, wi, None, 1).unwrap();
            let loss = tape.reduce_sum(y, Axes::All).unwrap();
            tape.backward(loss, &[wi]).unwrap()
        })
    });
}

fn adapt_step(c: &mut Criterion) {
    let batch = images(64, 4);
    let mut group = c.benchmark_group("adapt_step_b64");
    group.sample_size(20);
    for method in [Method::Tent, Method::Dualtta] {
        group.bench_function(method.as_str(), |b| {
            b.iter_batched(
                || Adapter::new(method, AdapterConfig::default(), model(0), 0).unwrap(),
                |mut a| a.adapt_step(&batch).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, forward, conv, adapt_step);
criterion_main!(benches);
