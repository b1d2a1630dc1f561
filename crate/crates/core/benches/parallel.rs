use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dne_core::conic::ClarabelBackend;
use dne_core::drco::{solve_drco, SolveConfig};
use dne_core::evaluation::{evaluate, PenaltyConfig};
use dne_core::expected_cost::{j_tau_settings, j_tau_with};
use dne_core::frontier::sweep;
use dne_core::grid::{parse_case, GridCase};
use dne_core::parallel::Execution;
use dne_core::uncertainty::{sample_gaussian, AmbiguitySet};

const PATHS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn case14() -> GridCase {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/case14_dne.m");
    parse_case(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn bench_evaluate(c: &mut Criterion) {
    let case = case14();
    let amb = AmbiguitySet::preset(&case).unwrap();
    let sol = solve_drco(&case, &amb, &SolveConfig::default()).unwrap();
    let set = sample_gaussian(&amb, 5000, 1).unwrap();
    let pen = PenaltyConfig::default();
    let mut g = c.benchmark_group("evaluate_5000");
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&sol, &case, &set, &pen, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let case = case14();
    let amb = AmbiguitySet::preset(&case).unwrap();
    let schedule = [1.0, 1000.0, 5000.0, 10_000.0, 20_000.0, 38_000.0];
    let mut g = c.benchmark_group("sweep_6_points");
    g.sample_size(10);
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep(&case, &amb, &schedule, &SolveConfig::default(), None, &PenaltyConfig::default(), exec).unwrap())
        });
    }
    g.finish();
}

fn bench_j_table(c: &mut Criterion) {
    // Uncached solves, as when filling a fresh CPLA table.
    let taus: Vec<f64> = (0..=32).map(|h| 4.0 * h as f64 / 32.0).collect();
    let settings = j_tau_settings();
    let mut g = c.benchmark_group("j_tau_33_points");
    g.sample_size(20);
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(taus.len(), |j| j_tau_with(&ClarabelBackend::new(), taus[j], &settings).unwrap().0))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_evaluate, bench_sweep, bench_j_table);
criterion_main!(benches);
