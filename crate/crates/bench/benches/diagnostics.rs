//! Posterior sampling and the evaluation metrics at test-suite sizes.

use criterion::{criterion_group, criterion_main, Criterion};
use multinpe_core::metrics::{default_quantiles, mmd, sbc_ece};
use multinpe_core::simulators::Exp1Config;
use multinpe_core::{Architecture, NetworkConfig, PosteriorModel, Task, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn diagnostics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("diagnostics");
    g.sample_size(10);

    let task = Task::Exp1(Exp1Config::default());
    let model = PosteriorModel::new(&task, Architecture::Late, &NetworkConfig::exp1(), 0).unwrap();
    let cond = Tensor::zeros([model.fusion.output_dim()]);
    g.bench_function("sample/1000-draws", |b| b.iter(|| model.sample(&cond, 1000, &mut rng).unwrap()));

    let draws = noise(&[300, 500, 10], &mut rng);
    let truths = noise(&[300, 10], &mut rng);
    let quantiles = default_quantiles();
    g.bench_function("sbc_ece/300x500x10", |b| b.iter(|| sbc_ece(&draws, &truths, &quantiles).unwrap()));

    let a = noise(&[500, 10], &mut rng);
    let b2 = noise(&[500, 10], &mut rng);
    g.bench_function("mmd/500x500", |b| b.iter(|| mmd(&a, &b2).unwrap()));
    g.finish();
}

criterion_group!(benches, diagnostics);
criterion_main!(benches);
