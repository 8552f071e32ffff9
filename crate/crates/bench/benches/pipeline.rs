use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use promptclass::aggregator::{attend, extract_knowledge, forward_variant};
use promptclass::encoder::encode;
use promptclass::training::{grad, train_classifier};
use promptclass::{EncoderConfig, TrainConfig, Variant};
use promptclass_bench::fixture;

fn tokenize(c: &mut Criterion) {
    let f = fixture(EncoderConfig::tiny, Variant::Full);
    let text = &f.data.train[0].text;
    c.bench_function("tokenize/one_example", |b| b.iter(|| f.data.vocab.encode_sequence(black_box(text))));
}

fn encoder_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("encode");
    for (name, shape) in [("tiny", EncoderConfig::tiny as fn(usize) -> EncoderConfig), ("desk", EncoderConfig::desk)] {
        let f = fixture(shape, Variant::Full);
        let ex = &f.prepared[0];
        g.bench_function(name, |b| b.iter(|| encode(&f.model.encoder, black_box(&ex.ids), ex.valid_length).unwrap()));
    }
    g.finish();
}

fn heads(c: &mut Criterion) {
    let mut g = c.benchmark_group("head");
    for v in Variant::ALL {
        let f = fixture(EncoderConfig::tiny, v);
        let ex = &f.prepared[0];
        let stack = encode(&f.model.encoder, &ex.ids, ex.valid_length).unwrap();
        g.bench_function(v.to_string(), |b| {
            b.iter(|| forward_variant(&f.model.head, black_box(&stack), ex.mask_position).unwrap())
        });
    }
    let f = fixture(EncoderConfig::tiny, Variant::Full);
    let ex = &f.prepared[0];
    let stack = encode(&f.model.encoder, &ex.ids, ex.valid_length).unwrap();
    let feats = extract_knowledge(&stack, ex.mask_position, f.model.head.config().layers).unwrap();
    g.bench_function("attend", |b| b.iter(|| attend(&f.model.head, black_box(&feats)).unwrap()));
    g.finish();
}

fn training(c: &mut Criterion) {
    let f = fixture(EncoderConfig::tiny, Variant::Full);
    let batch = &f.prepared[..4];
    c.bench_function("train/grad_batch4", |b| b.iter(|| grad(&f.model, black_box(batch)).unwrap()));
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let subset = &f.prepared[..32];
    c.bench_function("train/epoch32", |b| {
        b.iter_batched(
            || f.model.clone(),
            |mut m| train_classifier(&mut m, subset, None, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = tokenize, encoder_forward, heads, training
}
criterion_main!(benches);
