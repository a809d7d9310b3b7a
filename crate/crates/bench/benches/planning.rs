use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kpomdp::linalg::icf;
use kpomdp::{kernel_value_iteration, LowRank, PlanConfig};
use kpomdp_bench::pendulum;

fn planning(c: &mut Criterion) {
    let mut group = c.benchmark_group("plan_depth1");
    group.sample_size(10);
    for (label, low_rank) in [("dense", LowRank::Off), ("icf", LowRank::Tolerance { tolerance: 1e-8 })] {
        for n in [250, 500] {
            let f = pendulum(n, low_rank);
            let cfg = PlanConfig::default();
            group.bench_with_input(BenchmarkId::new(label, n), &f, |b, f| {
                b.iter(|| kernel_value_iteration(&f.model, &f.belief, &cfg, &f.rewards, &f.rewards).unwrap())
            });
        }
    }
    group.finish();
}

fn filtering(c: &mut Criterion) {
    let f = pendulum(500, LowRank::Off);
    c.bench_function("belief_update_n500", |b| {
        b.iter(|| {
            let beta = f.model.predict_obs_weights(&f.belief, 3).unwrap();
            f.model.kbr_posterior(&beta, &f.observation).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    for n in [250, 500] {
        group.bench_with_input(BenchmarkId::new("dense", n), &n, |b, &n| b.iter(|| pendulum(n, LowRank::Off)));
    }
    let g = pendulum(500, LowRank::Off).model.gram_states().clone();
    group.bench_function("icf_n500", |b| b.iter(|| icf(&g, 500, 1e-8).unwrap()));
    group.finish();
}

criterion_group!(benches, planning, filtering, training);
criterion_main!(benches);
