use criterion::{criterion_group, criterion_main, Criterion};
use multinpe_core::simulators::{ddm_sample, simulate_exp1, simulate_exp2, Exp1Config, Exp2Config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn simulators(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let exp1 = Exp1Config::default();
    c.bench_function("simulate/exp1", |b| b.iter(|| simulate_exp1(&exp1, &mut rng).unwrap()));

    let exp2 = Exp2Config { trials: 100, ..Exp2Config::default() };
    let mut g = c.benchmark_group("simulate");
    g.sample_size(20);
    g.bench_function("exp2/100-trials", |b| b.iter(|| simulate_exp2(&exp2, &mut rng).unwrap()));
    g.bench_function("ddm/single", |b| b.iter(|| ddm_sample(1.5, 0.3, 1.0, 0.5, 1e-3, 10.0, &mut rng).unwrap()));
    g.finish();
}

criterion_group!(benches, simulators);
criterion_main!(benches);
