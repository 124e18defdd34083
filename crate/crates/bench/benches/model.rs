use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hrgnn_bench::synthetic_batch;
use hrgnn_core::graph::{edge_weight_values, QaGraph};
use hrgnn_core::model::{Hrgnn, ModelConfig};
use hrgnn_core::numerics::{init_uniform, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 2000;

fn small() -> ModelConfig {
    ModelConfig {
        embed_dim: 32,
        gru_hidden: 16,
        node_dim: 32,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn gru(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("gru");
    for len in [16usize, 64, 256] {
        let x = init_uniform(len, 150, 0.5, &mut rng);
        let w = init_uniform(50, 150, 0.1, &mut rng);
        let b = init_uniform(1, 150, 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::new("forward_backward", len), &len, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
                let h = tape.gru(xv, wv, bv, false).unwrap();
                let s = tape.sum_all(h);
                tape.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn edge_weights(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let graph = QaGraph::build(8, 24, 10, 10, &BTreeSet::new()).unwrap();
    let feats = init_uniform(32, 256, 0.1, &mut rng);
    let w_e = init_uniform(256, 256, 0.1, &mut rng);
    c.bench_function("edge_weights_32_vertices", |b| {
        b.iter(|| edge_weight_values(&feats, &w_e, &graph).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let batch = synthetic_batch(8, 5, 4, 16, VOCAB);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for (name, config) in [("small", small()), ("default", ModelConfig::default())] {
        let model = Hrgnn::new(config, VOCAB, 3).unwrap();
        group.bench_function(BenchmarkId::new("predict_8", name), |b| b.iter(|| model.predict(&batch).unwrap()));
        group.bench_function(BenchmarkId::new("batch_gradient_8", name), |b| {
            b.iter(|| model.batch_gradient(&batch, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gru, edge_weights, model);
criterion_main!(benches);
