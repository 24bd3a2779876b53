use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ilr_bench::desk_fixture;
use ilr_core::model::{layer_forward, AttentionContext};
use ilr_core::{Graph, PositionalMode, Tensor};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = Tensor::<f32>::from_fn([n, n], |i| (i % 17) as f32 * 0.01).unwrap();
        let b = Tensor::<f32>::from_fn([n, n], |i| (i % 13) as f32 * 0.02).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let graph = Graph::new();
                black_box(graph.constant(a.clone()).matmul(graph.constant(b.clone())).unwrap().value())
            })
        });
    }
    g.finish();
}

fn layer(c: &mut Criterion) {
    let mut g = c.benchmark_group("layer_forward");
    for mode in PositionalMode::ALL {
        let (params, batch) = desk_fixture(mode, 4);
        let cfg = params.config.clone();
        let x = Tensor::<f32>::from_fn([batch.inputs.len(), cfg.hidden_dim], |i| ((i % 29) as f32 - 14.0) * 0.05).unwrap();
        g.bench_function(mode.label(), |bench| {
            bench.iter(|| {
                let graph = Graph::new();
                let bound = params.bind(&graph, false);
                let ctx = AttentionContext::new(&cfg, batch.inputs.len(), batch.seq_len).unwrap();
                black_box(layer_forward(graph.constant(x.clone()), &bound.layers[0], &cfg, &ctx).unwrap().value())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, layer);
criterion_main!(benches);
