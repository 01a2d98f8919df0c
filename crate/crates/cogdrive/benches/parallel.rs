//! Compares the sequential and (feature-gated) parallel map paths on the two
//! batch workloads that actually use them: per-scene prediction and per-scene
//! metric evaluation. With the `parallel` feature off, `par_map` degrades to
//! the sequential path and the two series should coincide.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cogdrive::metrics::evaluate_scene;
use cogdrive::prednet::{init_params, predict, NetConfig};
use cogdrive::scene::{synth_scene, GenConfig, SynthResult, Template};
use cogdrive::util::{par_map, seq_map};

fn fixtures(n: usize) -> Vec<SynthResult> {
    let gen = GenConfig::new(Template::Crossing).with_sigma(0.1);
    (0..n as u64).map(|i| synth_scene(&gen, i).unwrap()).collect()
}

fn bench_batch_predict(c: &mut Criterion) {
    let net = NetConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_modes: 2,
        n_neighbor: 2,
        t_f: 30,
    };
    let store = init_params(&net, 0).unwrap();
    let mut group = c.benchmark_group("batch_predict");
    group.sample_size(10);
    for n in [4usize, 16] {
        let scenes: Vec<_> = fixtures(n).into_iter().map(|r| r.scene).collect();
        group.bench_with_input(BenchmarkId::new("seq", n), &scenes, |b, scenes| {
            b.iter(|| seq_map(scenes.clone(), |s| predict(&store, &net, &s).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("par", n), &scenes, |b, scenes| {
            b.iter(|| par_map(scenes.clone(), |s| predict(&store, &net, &s).unwrap()))
        });
    }
    group.finish();
}

fn bench_batch_eval(c: &mut Criterion) {
    let net = NetConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_modes: 2,
        n_neighbor: 2,
        t_f: 30,
    };
    let store = init_params(&net, 0).unwrap();
    let cases: Vec<_> = fixtures(32)
        .into_iter()
        .map(|r| {
            let pred = predict(&store, &net, &r.scene).unwrap();
            (pred, r.futures)
        })
        .collect();
    let mut group = c.benchmark_group("batch_metrics");
    group.bench_function("seq", |b| {
        b.iter(|| seq_map(cases.clone(), |(p, f)| evaluate_scene(&p, &f).unwrap()))
    });
    group.bench_function("par", |b| {
        b.iter(|| par_map(cases.clone(), |(p, f)| evaluate_scene(&p, &f).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_predict, bench_batch_eval);
criterion_main!(benches);
