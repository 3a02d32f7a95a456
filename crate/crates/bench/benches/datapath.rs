use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{Rng, SeedableRng};

use w1a8::coe::{build_roms, emit_coe, parse_coe, Radix, DEFAULT_WORD_WIDTH};
use w1a8::datapath::compile;
use w1a8::fixture::{
    default_fixture, noise_image, random_manifest, tiny_fixture_model, FIXTURE_SEED,
};
use w1a8::quant::sign_accumulate;
use w1a8::reference::forward_compiled;
use w1a8::stream::{run_compiled, StreamConfig};

fn pe(c: &mut Criterion) {
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    // one conv5 output channel: 128 inputs, 3x3 window
    let n = 128 * 9;
    let signs: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
    let values: Vec<i64> = (0..n).map(|_| rng.gen_range(0..1 << 24)).collect();
    let mut g = c.benchmark_group("pe");
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("sign_accumulate_1152", |b| {
        b.iter(|| sign_accumulate(black_box(&signs), black_box(&values)))
    });
    g.finish();
}

fn engines(c: &mut Criterion) {
    let model = tiny_fixture_model();
    let m = random_manifest(&model, 5).unwrap();
    let cm = compile(&m).unwrap();
    let img = noise_image(model.input, 6);
    let mut g = c.benchmark_group("tiny_fixture");
    g.bench_function("direct", |b| {
        b.iter(|| forward_compiled(&cm, black_box(&img)).unwrap())
    });
    g.bench_function("stream", |b| {
        b.iter(|| run_compiled(&cm, black_box(&img), &StreamConfig::default()).unwrap())
    });
    g.finish();
}

fn full_size(c: &mut Criterion) {
    let m = default_fixture(FIXTURE_SEED).unwrap();
    let cm = compile(&m).unwrap();
    let img = noise_image(m.model.input, 7);
    let mut g = c.benchmark_group("default_model");
    g.sample_size(10);
    g.bench_function("direct", |b| {
        b.iter(|| forward_compiled(&cm, black_box(&img)).unwrap())
    });
    g.finish();
}

fn coe(c: &mut Criterion) {
    let m = default_fixture(FIXTURE_SEED).unwrap();
    let mut g = c.benchmark_group("coe");
    g.bench_function("build_roms_default", |b| {
        b.iter(|| build_roms(black_box(&m), DEFAULT_WORD_WIDTH, Radix::Hex).unwrap())
    });
    let roms = build_roms(&m, DEFAULT_WORD_WIDTH, Radix::Hex).unwrap();
    let texts: Vec<String> = roms.iter().map(|(_, img)| emit_coe(img)).collect();
    g.bench_function("parse_all_default", |b| {
        b.iter_batched(
            || texts.clone(),
            |texts| {
                for t in &texts {
                    parse_coe(t, DEFAULT_WORD_WIDTH).unwrap();
                }
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, pe, engines, full_size, coe);
criterion_main!(benches);
