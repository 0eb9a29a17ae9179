use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use histokind_bench::{random_codes, rcc, RCC_TEXT};
use histokind_core::codebook::parse_codebook;
use histokind_core::embednet::{forward_bag, Bag, ModelParams};
use histokind_core::ensemble::{vote_slide, BagPrediction};
use histokind_core::knowspace::classify_batch;
use histokind_core::Scale;

fn bench_parse(c: &mut Criterion) {
    c.bench_function("parse_rcc_codebook", |b| {
        b.iter(|| parse_codebook(black_box(RCC_TEXT)).unwrap())
    });
}

fn bench_classify(c: &mut Criterion) {
    let cb = rcc();
    let mut group = c.benchmark_group("classify_batch");
    for n in [1_000usize, 10_000, 20_000] {
        let codes = random_codes(&cb, n);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &codes, |b, codes| {
            b.iter(|| classify_batch(black_box(codes), &cb).unwrap())
        });
    }
    group.finish();
}

fn bench_vote(c: &mut Criterion) {
    let preds: Vec<BagPrediction> = (0..16)
        .map(|i| {
            let probs = (0..6).map(|j| ((i * 7 + j * 13) % 100) as f64 / 100.0).collect();
            BagPrediction::new("s".into(), Scale::S1, i as u32, probs).unwrap()
        })
        .collect();
    c.bench_function("vote_slide_16_bags", |b| {
        b.iter(|| vote_slide(black_box(&preds), 0.5).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let params = ModelParams::init(32, 64, 6, 0);
    let bag = Bag::new(
        "s".into(),
        Scale::S1,
        0,
        (0..8).map(|i| (0..32).map(|j| ((i + j) % 5) as f64 - 2.0).collect()).collect(),
        vec![true; 6],
    )
    .unwrap();
    c.bench_function("forward_bag_8x32", |b| {
        b.iter(|| forward_bag(black_box(&params), black_box(&bag)).unwrap())
    });
}

criterion_group!(benches, bench_parse, bench_classify, bench_vote, bench_forward);
criterion_main!(benches);
