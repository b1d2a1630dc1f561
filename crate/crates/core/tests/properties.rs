use nalgebra::DMatrix;
use proptest::prelude::*;

use dne_core::drco::DneSolution;
use dne_core::evaluation::{evaluate, PenaltyConfig};
use dne_core::expected_cost::{build_cpla, j_tau};
use dne_core::grid::{parse_case, serialize_case, GridCase};
use dne_core::parallel::Execution;
use dne_core::uncertainty::{calibrate, gauss_worst_coverage, gauss_threshold, worst_coverage_oracle, ScenarioSet};

/// A connected network: a random spanning tree plus extra edges, one generator at bus 1.
fn network_text(n: usize, parents: &[usize], extra: &[(usize, usize)], reactance: &[f64], loads: &[f64]) -> String {
    let mut s = String::from("mpc.time = [ 1 60 5 ];\nmpc.bus = [\n");
    for b in 0..n {
        s += &format!("  {} {} {} 0;\n", b + 1, if b == 0 { 3 } else { 1 }, loads[b]);
    }
    s += "];\nmpc.branch = [\n";
    let mut edges: Vec<(usize, usize)> = (1..n).map(|b| (parents[b - 1] % b, b)).collect();
    edges.extend(extra.iter().filter(|(a, b)| a % n != b % n).map(|(a, b)| (a % n, b % n)));
    for (j, (a, b)) in edges.iter().enumerate() {
        s += &format!("  {} {} 0 {} 0 0 0 0 0 0 1;\n", a + 1, b + 1, reactance[j % reactance.len()]);
    }
    let total: f64 = loads.iter().sum();
    s += &format!("];\nmpc.gen = [ 1 0 0 0 0 1 100 1 {} 0 ];\nmpc.gencost = [ 2 0 0 3 0.01 20 0 ];\n", total + 10.0);
    s
}

fn network() -> impl Strategy<Value = GridCase> {
    (2usize..8)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(0usize..64, n - 1),
                prop::collection::vec((0usize..8, 0usize..8), 0..4),
                prop::collection::vec(0.02f64..1.0, 12),
                prop::collection::vec(0.0f64..50.0, n),
            )
        })
        .prop_map(|(n, p, e, x, d)| parse_case(&network_text(n, &p, &e, &x, &d)).unwrap())
}

/// Flows from the Laplacian pseudo-inverse: θ = L⁺p, f = b(θ_from − θ_to).
fn pinv_flows(case: &GridCase, injection: &[f64]) -> Vec<f64> {
    let n = case.buses.len();
    let pos = |id: usize| case.bus_position(id).unwrap();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for l in &case.lines {
        let (a, b, s) = (pos(l.from), pos(l.to), l.susceptance());
        lap[(a, a)] += s;
        lap[(b, b)] += s;
        lap[(a, b)] -= s;
        lap[(b, a)] -= s;
    }
    let theta = lap.svd(true, true).pseudo_inverse(1e-12).unwrap() * DMatrix::from_column_slice(n, 1, injection);
    case.lines
        .iter()
        .map(|l| l.susceptance() * (theta[pos(l.from)] - theta[pos(l.to)]))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flows_match_pseudo_inverse(case in network(), raw in prop::collection::vec(-50.0f64..50.0, 8)) {
        let n = case.buses.len();
        let mut inj: Vec<f64> = raw[..n].to_vec();
        let mean = inj.iter().sum::<f64>() / n as f64;
        inj.iter_mut().for_each(|p| *p -= mean);
        let a = case.shift_factors.flows(&inj);
        let b = pinv_flows(&case, &inj);
        let scale = b.iter().fold(1.0f64, |m, f| m.max(f.abs()));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn shift_factors_ignore_loads(case in network(), factor in 0.1f64..3.0) {
        let scaled = case.scale_loads(factor).unwrap();
        prop_assert_eq!(&scaled.shift_factors, &case.shift_factors);
    }

    #[test]
    fn serialize_round_trip(case in network()) {
        let again = parse_case(&serialize_case(&case)).unwrap();
        prop_assert_eq!(again, case);
    }

    #[test]
    fn calibrate_is_equivariant(
        data in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 2), 3..12),
        shift in -100.0f64..100.0,
        scale in 0.1f64..10.0,
    ) {
        prop_assume!(data.iter().any(|r| (r[0] - data[0][0]).abs() > 1e-3));
        prop_assume!(data.iter().any(|r| (r[1] - data[0][1]).abs() > 1e-3));
        // One 1×2 block per historical sample.
        let blocks = |f: &dyn Fn(f64) -> f64| -> Vec<Vec<Vec<f64>>> {
            data.iter().map(|r| vec![r.iter().map(|&x| f(x)).collect()]).collect()
        };
        let base = calibrate(&blocks(&|x| x)).unwrap();
        let other = calibrate(&blocks(&|x| scale * x + shift)).unwrap();
        for k in 0..2 {
            let (m0, s0) = (base.mean[k][0], base.std[k][0]);
            let (m1, s1) = (other.mean[k][0], other.std[k][0]);
            prop_assert!((m1 - (scale * m0 + shift)).abs() <= 1e-9 * (1.0 + m1.abs()));
            prop_assert!((s1 - scale * s0).abs() <= 1e-9 * s1);
        }
    }

    #[test]
    fn gauss_coverage_increasing(a in 1.155f64..50.0, step in 1e-3f64..5.0) {
        let lo = a.max(gauss_threshold());
        prop_assert!(gauss_worst_coverage(lo + step).unwrap() > gauss_worst_coverage(lo).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn oracle_dominates_gauss(lambda in 1.2f64..6.0) {
        let oracle = worst_coverage_oracle(lambda, 10.0, 801).unwrap();
        prop_assert!(oracle >= gauss_worst_coverage(lambda).unwrap() - 1e-7);
    }

    #[test]
    fn j_convex_and_nonincreasing(tau in 0.05f64..4.0, h in 0.01f64..0.5) {
        let (a, b, c) = (j_tau(tau - h.min(tau)).unwrap(), j_tau(tau).unwrap(), j_tau(tau + h.min(tau)).unwrap());
        prop_assert!(a + c - 2.0 * b >= -1e-7);
        prop_assert!(c <= b + 1e-7 && b <= a + 1e-7);
    }

    #[test]
    fn cpla_above_j(tau in 0.0f64..3.0, h in 1usize..12) {
        let cpla = build_cpla(0.0, 3.0, h).unwrap();
        prop_assert!(cpla.value(tau).unwrap() >= j_tau(tau).unwrap() - 1e-6);
    }
}

fn box_solution(lo: Vec<f64>, hi: Vec<f64>) -> (GridCase, DneSolution) {
    let t = lo.len();
    let case = parse_case(&format!(
        "mpc.time = [ {t} 60 5 ];\nmpc.bus = [ 1 3 50 0 ];\nmpc.branch = [ ];\n\
         mpc.gen = [ 1 0 0 0 0 1 100 1 100 0 ];\nmpc.gencost = [ 2 0 0 3 0.01 20 0 ];\n\
         mpc.renewables = [ 1 0 60 ];\nmpc.forecast = [ {} ];\n",
        vec!["20"; t].join("; ")
    ))
    .unwrap();
    let sol = DneSolution {
        delta: 0.0,
        u0: 0.7,
        agc: vec![true],
        p_hat: vec![vec![30.0; t]],
        s: vec![vec![vec![0.0; t]]],
        s0: vec![vec![vec![0.0; t]]],
        b_coef: vec![vec![vec![-1.0; t]]],
        b_const: vec![vec![vec![0.0; t]]],
        eps_l: vec![lo],
        eps_u: vec![hi],
        u: 0.7,
        r: vec![],
        s_budget: vec![],
        z: vec![],
        objective: Default::default(),
        status: dne_core::conic::SolveStatus::Optimal,
        solve_time: 0.0,
        iterations: 0,
        verification: None,
    };
    (case, sol)
}

fn scenarios(values: Vec<Vec<f64>>) -> ScenarioSet {
    ScenarioSet { scenarios: values.into_iter().map(|v| vec![v]).collect(), seed: 0, descriptor: String::new() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shrinking_box_never_reduces_violations(
        widths in prop::collection::vec((0.0f64..15.0, 0.0f64..15.0, 0.0f64..1.0, 0.0f64..1.0), 3),
        eps in prop::collection::vec(prop::collection::vec(-25.0f64..25.0, 3), 1..20),
    ) {
        let lo: Vec<f64> = widths.iter().map(|w| -w.0).collect();
        let hi: Vec<f64> = widths.iter().map(|w| w.1).collect();
        let lo2: Vec<f64> = widths.iter().map(|w| -w.0 * w.2).collect();
        let hi2: Vec<f64> = widths.iter().map(|w| w.1 * w.3).collect();
        let (case, wide) = box_solution(lo, hi);
        let (_, narrow) = box_solution(lo2, hi2);
        let set = scenarios(eps);
        let pen = PenaltyConfig::default();
        let a = evaluate(&wide, &case, &set, &pen, Execution::Sequential).unwrap();
        let b = evaluate(&narrow, &case, &set, &pen, Execution::Sequential).unwrap();
        for j in 0..set.len() {
            prop_assert!(b.shed[j] + b.curtailed[j] >= a.shed[j] + a.curtailed[j] - 1e-12);
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_order_free(
        eps in prop::collection::vec(prop::collection::vec(-25.0f64..25.0, 3), 1..40),
    ) {
        let (case, sol) = box_solution(vec![-5.0; 3], vec![7.0; 3]);
        let set = scenarios(eps);
        let pen = PenaltyConfig::default();
        let a = evaluate(&sol, &case, &set, &pen, Execution::Sequential).unwrap();
        let b = evaluate(&sol, &case, &set, &pen, Execution::Parallel).unwrap();
        let c = evaluate(&sol, &case, &set, &pen, Execution::Sequential).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &c);
        let total: f64 = a.costs.iter().sum();
        prop_assert!((a.avg_cost * a.scenarios as f64 - total).abs() <= 1e-6 * total.abs().max(1.0));
        prop_assert!(a.max_cost >= a.avg_cost);
        prop_assert!(a.utilization.iter().all(|u| (0.0..=1.0).contains(u)));
    }
}
