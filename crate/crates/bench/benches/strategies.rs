use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ilr_bench::desk_fixture;
use ilr_core::recurrence::loss_and_grads;
use ilr_core::{PositionalMode, RecurrenceStrategy};

fn training_step(c: &mut Criterion) {
    let (params, batch) = desk_fixture(PositionalMode::rope(), 4);
    let mut g = c.benchmark_group("loss_and_grads");
    g.sample_size(20);
    for s in [
        RecurrenceStrategy::Baseline,
        RecurrenceStrategy::ilr(&[2, 1, 1, 1]).unwrap(),
        RecurrenceStrategy::ilr(&[2, 2, 2, 2]).unwrap(),
        RecurrenceStrategy::Block { steps: 2 },
    ] {
        g.bench_function(s.to_string(), |bench| bench.iter(|| black_box(loss_and_grads(&params, &s, &batch).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, training_step);
criterion_main!(benches);
