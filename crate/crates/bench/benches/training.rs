use criterion::{black_box, criterion_group, criterion_main, Criterion};
use flame_bench::{config, dataset, ensemble};
use flame_core::data::make_batches;
use flame_core::numerics::Tape;
use flame_core::training::flame_batch_loss;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn flame_step(c: &mut Criterion) {
    let cfg = config(10);
    let ds = dataset(400, cfg.max_len);
    let state = ensemble(&cfg, ds.num_items());
    let batch = make_batches(&ds, cfg.batch_size, false, 0, true)
        .unwrap()
        .remove(0);
    let contrastive = cfg.contrastive().unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (name, lambda) in [("single", 0.0), ("flame", 0.1)] {
        group.bench_function(name, |bench| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            bench.iter(|| {
                let mut tape = Tape::new();
                let ens = state.bind(&mut tape, true);
                let loss = flame_batch_loss(
                    &mut tape,
                    &ens,
                    &batch,
                    lambda,
                    &contrastive,
                    None,
                    true,
                    &mut rng,
                )
                .unwrap();
                tape.backward(loss.total).unwrap();
                black_box(tape.value(loss.total).data()[0])
            })
        });
    }
    group.finish();
}

criterion_group!(benches, flame_step);
criterion_main!(benches);
