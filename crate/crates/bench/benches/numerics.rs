use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use flame_core::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [64, 256] {
        let a = random(&[n, 64], &mut rng);
        let b = random(&[64, n], &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
                let y = tape.matmul(va, vb, false).unwrap();
                let s = tape.sum(y);
                tape.backward(s).unwrap();
                black_box(tape.grad(va).map(|g| g[0]))
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_fwd_bwd");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (batch, seq, d, heads) = (128, 10, 32, 2);
    let q = random(&[batch * seq, d], &mut rng);
    let k = random(&[batch * seq, d], &mut rng);
    let v = random(&[batch * seq, d], &mut rng);
    let valid = vec![true; batch * seq];
    group.bench_function("b128_t10_d32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (vq, vk, vv) = (
                tape.param(q.clone()),
                tape.param(k.clone()),
                tape.param(v.clone()),
            );
            let y = tape.attention(vq, vk, vv, heads, seq, &valid).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(vq).map(|g| g[0]))
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, attention);
criterion_main!(benches);
