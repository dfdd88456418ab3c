use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qkschedule::par::Exec;
use qkschedule::tensor::kernels::gemm_seq;
use qkschedule::theory::{rho0_monte_carlo_on, run_suite_on, Activation, GatedEnergyCase, Suite, REFERENCE_NU};

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for size in [64usize, 256] {
        let a: Vec<f32> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.bench_with_input(BenchmarkId::new("seq", size), &size, |bench, &n| {
            bench.iter(|| {
                let mut out = vec![0.0f32; n * n];
                gemm_seq(n, n, n, black_box(&a), black_box(&b), &mut out);
                out
            })
        });
        #[cfg(feature = "parallel")]
        g.bench_with_input(BenchmarkId::new("par", size), &size, |bench, &n| {
            bench.iter(|| {
                let mut out = vec![0.0f32; n * n];
                qkschedule::tensor::kernels::gemm_par(n, n, n, black_box(&a), black_box(&b), &mut out);
                out
            })
        });
    }
    g.finish();
}

fn theorem1_suite(c: &mut Criterion) {
    let mut g = c.benchmark_group("theorem1_suite_200");
    g.sample_size(10);
    for (name, exec) in [("seq", Exec::Sequential), ("par", Exec::Parallel)] {
        g.bench_function(name, |b| b.iter(|| run_suite_on(Suite::Theorem1, 200, 0, exec).unwrap().pass));
    }
    g.finish();
}

fn rho0_mc(c: &mut Criterion) {
    let mut g = c.benchmark_group("rho0_mc_1e5");
    g.sample_size(10);
    let case = GatedEnergyCase { samples: 100_000, ..GatedEnergyCase::matched(Activation::Gelu, REFERENCE_NU) };
    for (name, exec) in [("seq", Exec::Sequential), ("par", Exec::Parallel)] {
        g.bench_function(name, |b| b.iter(|| rho0_monte_carlo_on(&case, 0, exec).unwrap().value));
    }
    g.finish();
}

criterion_group!(benches, gemm, theorem1_suite, rho0_mc);
criterion_main!(benches);
