use criterion::{black_box, criterion_group, criterion_main, Criterion};
use flame_bench::{config, dataset, ensemble, network};
use flame_core::data::Split;
use flame_core::evaluation::{evaluate_network, evaluate_paths, EvalOptions};

fn evaluation(c: &mut Criterion) {
    let cfg = config(10);
    let ds = dataset(400, cfg.max_len);
    let net = network(&cfg, ds.num_items(), 3);
    let state = ensemble(&cfg, ds.num_items());
    let opts = EvalOptions::default();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    group.bench_function("network_test", |b| {
        b.iter(|| {
            black_box(
                evaluate_network(&net, &ds, Split::Test, &opts)
                    .unwrap()
                    .ndcg(20),
            )
        })
    });
    group.bench_function("all_paths_test", |b| {
        b.iter(|| black_box(evaluate_paths(&state, &ds, Split::Test, &opts).unwrap().per))
    });
    group.finish();
}

criterion_group!(benches, evaluation);
criterion_main!(benches);
