//! Parallel core against the sequential fallback on the same inputs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use gloc_core::dataset::{generate_random_task, RandomTaskConfig, Split};
use gloc_core::graph::{knn, Metric};
use gloc_core::model::ModelConfig;
use gloc_core::oracle::{exact_shapley, mc_shapley, FnUtility};
use gloc_core::par;
use gloc_core::sampling::{collect_utilities, sample_memberships, SamplingConfig};

fn both<F: Fn()>(c: &mut Criterion, name: &str, f: F) {
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", par::current_workers()), |b| b.iter(&f));
    group.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(|| par::sequential(&f)));
    group.finish();
}

fn task() -> gloc_core::Dataset {
    let cfg = RandomTaskConfig { train_per_class: 100, valid_per_class: 100, test_per_class: 10, ..Default::default() };
    generate_random_task(&cfg, 1).unwrap()
}

fn utilities(c: &mut Criterion) {
    let data = task();
    let n = data.split_indices(Split::Train).len();
    let (membership, _) = sample_memberships(n, &SamplingConfig { m: 64, ..Default::default() }).unwrap();
    let model = ModelConfig::default();
    both(c, "collect_utilities", || {
        black_box(collect_utilities(&membership, &data, &model, Split::Valid).unwrap());
    });
}

fn shapley(c: &mut Criterion) {
    let w: Vec<f64> = (0..14).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
    let game = |s: &[usize]| {
        let a: f64 = s.iter().map(|&i| w[i]).sum();
        a.tanh()
    };
    let u = FnUtility::new(14, game);
    let ids: Vec<u64> = (0..14).collect();
    both(c, "exact_shapley_n14", || {
        black_box(exact_shapley(&u, &ids).unwrap());
    });
    both(c, "mc_shapley_2000", || {
        black_box(mc_shapley(&u, &ids, 2000, 5).unwrap());
    });
}

fn neighbours(c: &mut Criterion) {
    let data = task();
    let rows = data.split_indices(Split::Train);
    both(c, "knn_cosine", || {
        black_box(knn(&data, &rows, 5, Metric::Cosine).unwrap());
    });
}

criterion_group!(benches, utilities, shapley, neighbours);
criterion_main!(benches);
