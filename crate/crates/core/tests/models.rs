use dne_core::conic::SolverSettings;
use dne_core::drco::{solve_drco, DneSolution, ExtensionConfig, SolveConfig};
use dne_core::evaluation::{
    evaluate, evaluate_checked, implied_utilization, paired_costs_csv, solve_odne_baseline, verify_robust, PenaltyConfig,
};
use dne_core::frontier::{nesting_fraction, sweep};
use dne_core::grid::{parse_case, GridCase};
use dne_core::parallel::Execution;
use dne_core::uncertainty::{gauss_worst_coverage, sample_gaussian, AmbiguitySet, ScenarioSet};
use dne_core::Error;

fn bundled(name: &str) -> GridCase {
    let path = format!("{}/data/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_case(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn solve(case: &GridCase, amb: &AmbiguitySet, delta: f64) -> DneSolution {
    solve_drco(case, amb, &SolveConfig { delta, ..SolveConfig::default() }).unwrap()
}

#[test]
fn bundled_cases_parse() {
    let c14 = bundled("case14_dne.m");
    assert_eq!((c14.buses.len(), c14.lines.len(), c14.generators.len(), c14.renewables.len()), (14, 20, 5, 2));
    assert_eq!(c14.periods(), 24);
    let c2 = bundled("case2.m");
    assert_eq!(c2.periods(), 4);
}

#[test]
fn two_bus_solution_is_robust_and_balanced() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let sol = solve(&case, &amb, 10_000.0);
    assert!(sol.verification.as_ref().unwrap().pass);
    assert!(sol.u < 1.0 && sol.u >= 0.7 - 1e-9);
    let robust = verify_robust(&sol, &case).unwrap();
    assert!(robust.max_violation <= 1e-6, "{robust:?}");
    for t in 0..case.periods() {
        let b: f64 = (0..case.generators.len()).map(|i| sol.b_coef[i][0][t]).sum();
        assert!((b + 1.0).abs() <= 1e-9, "period {t}: ΣB = {b}");
        let c: f64 = (0..case.generators.len()).map(|i| sol.b_const[i][0][t]).sum();
        assert!(c.abs() <= 1e-9 * (1.0 + sol.eps_l[0][t].abs()), "period {t}: Σb = {c}");
    }
}

#[test]
fn chance_bound_holds_per_period() {
    let case = bundled("case14_dne.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let sol = solve(&case, &amb, 10_000.0);
    for t in 0..case.periods() {
        let miss: f64 = (0..case.renewables.len())
            .map(|k| {
                let (mu, sigma) = (amb.mean[k][t], amb.std[k][t]);
                let lambda = (mu - sol.eps_l[k][t]).min(sol.eps_u[k][t] - mu) / sigma;
                1.0 - gauss_worst_coverage(lambda).unwrap()
            })
            .sum();
        assert!(1.0 - miss >= sol.u - 1e-6, "period {t}: {} < {}", 1.0 - miss, sol.u);
    }
    assert!(implied_utilization(&amb, &sol.eps_l, &sol.eps_u) >= sol.u - 1e-6);
}

#[test]
fn zero_delta_leaves_utilization_unrewarded() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let sol = solve(&case, &amb, 0.0);
    assert!(sol.u >= 0.7 - 1e-9 && sol.u < 1.0);
    // Any feasible u is optimal at δ = 0, so pinning it at the floor costs nothing.
    let floor = solve_drco(&case, &amb, &SolveConfig { delta: 0.0, u0: sol.u, ..SolveConfig::default() }).unwrap();
    let at_floor = solve_drco(&case, &amb, &SolveConfig { delta: 0.0, u0: 0.7, ..SolveConfig::default() }).unwrap();
    assert!((floor.objective.total - at_floor.objective.total).abs() <= 1e-6 * at_floor.objective.total);
    assert!((sol.objective.total - sol.objective.dispatch_cost).abs() <= 1e-6 * sol.objective.total);
}

#[test]
fn scaling_is_equivariant() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let alpha = 10.0;
    let big = case.scale_power(alpha).unwrap();
    let big_amb = amb.scaled(alpha).unwrap();
    let a = solve(&case, &amb, 10_000.0);
    // C(αp) − c0 scales by α, so δ must too for the same trade-off.
    let b = solve(&big, &big_amb, 10_000.0 * alpha);
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0);
    for t in 0..case.periods() {
        assert!(close(alpha * a.p_hat[0][t], b.p_hat[0][t]), "p̂ at {t}");
    }
    assert!((a.u - b.u).abs() <= 1e-6);
    // Boxes away from the binding period are not unique; the scaled box must
    // still be robust and certify the same u on the scaled instance.
    let mut mapped = a.clone();
    for m in [&mut mapped.eps_l, &mut mapped.eps_u] {
        m.iter_mut().flatten().for_each(|e| *e *= alpha);
    }
    for m in [&mut mapped.b_const, &mut mapped.s, &mut mapped.s0] {
        m.iter_mut().flatten().flatten().for_each(|e| *e *= alpha);
    }
    mapped.p_hat.iter_mut().flatten().for_each(|p| *p *= alpha);
    assert!(verify_robust(&mapped, &big).unwrap().max_violation <= 1e-6 * alpha);
    assert!(implied_utilization(&big_amb, &mapped.eps_l, &mapped.eps_u) >= b.u - 1e-6);
}

#[test]
fn widened_box_is_caught() {
    let case = bundled("case14_dne.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let mut sol = solve(&case, &amb, 10_000.0);
    for row in sol.eps_u.iter_mut() {
        row.iter_mut().for_each(|e| *e *= 1.5);
    }
    let r = verify_robust(&sol, &case).unwrap();
    assert!(r.max_violation > 1e-6, "{r:?}");
}

#[test]
fn collapsed_box_reports_nominal_slack() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let mut sol = solve(&case, &amb, 10_000.0);
    for k in 0..sol.eps_l.len() {
        for t in 0..case.periods() {
            sol.eps_l[k][t] = 0.0;
            sol.eps_u[k][t] = 0.0;
        }
    }
    let r = verify_robust(&sol, &case).unwrap();
    // At ε = 0 every row is the nominal row at p̂ + Σb.
    assert!(r.max_violation <= 1e-6);
    assert!(r.max_balance <= 1e-6);
}

#[test]
fn shed_below_box_is_priced() {
    let case = bundled("case14_dne.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let sol = solve(&case, &amb, 10_000.0);
    let mut inside = vec![vec![0.0; case.periods()]; case.renewables.len()];
    let mut low = inside.clone();
    low[1][5] = sol.eps_l[1][5] - 5.0;
    inside[0][0] = 0.5 * sol.eps_u[0][0];
    let set = ScenarioSet { scenarios: vec![inside, low], seed: 0, descriptor: String::new() };
    let r = evaluate_checked(&sol, &case, &set, &PenaltyConfig::default(), Execution::Sequential, 1e-6).unwrap();
    assert_eq!(r.shed[0] + r.curtailed[0], 0.0);
    assert!((r.shed[1] - 5.0).abs() < 1e-9);
    assert_eq!(r.curtailed[1], 0.0);
    let fuel_at_lower: f64 = {
        let mut clipped = vec![vec![0.0; case.periods()]; case.renewables.len()];
        clipped[1][5] = sol.eps_l[1][5];
        let set = ScenarioSet { scenarios: vec![clipped], seed: 0, descriptor: String::new() };
        evaluate(&sol, &case, &set, &PenaltyConfig::default(), Execution::Sequential).unwrap().costs[0]
    };
    assert!((r.costs[1] - fuel_at_lower - 10_000.0).abs() < 1e-6);
    assert_eq!(r.utilization[5], 0.5);
}

#[test]
fn baseline_on_single_generator() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let base = solve_odne_baseline(&case, &amb, None, &SolverSettings::default()).unwrap();
    assert!(base.verification.as_ref().unwrap().pass);
    let r = verify_robust(&base, &case).unwrap();
    assert!(r.max_violation <= 1e-6, "{r:?}");
    // The window is ±2 MW/min × 5 min; the box fills it or the wind bounds.
    for t in 0..case.periods() {
        let w = &case.renewables[0];
        let down = (w.forecast[t] - w.w_min).min(10.0);
        let up = (w.w_max - w.forecast[t]).min(10.0);
        assert!((base.eps_l[0][t] + down).abs() < 1e-5, "t={t} {}", base.eps_l[0][t]);
        assert!((base.eps_u[0][t] - up).abs() < 1e-5, "t={t} {}", base.eps_u[0][t]);
    }
}

#[test]
fn baseline_utilization_declines_over_the_day() {
    let case = bundled("case14_dne.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let base = solve_odne_baseline(&case, &amb, None, &SolverSettings::default()).unwrap();
    let set = sample_gaussian(&amb, 5000, 3).unwrap();
    let r = evaluate(&base, &case, &set, &PenaltyConfig::default(), Execution::default()).unwrap();
    // Least-squares slope of utilization against t.
    let n = r.utilization.len() as f64;
    let tm = (n - 1.0) / 2.0;
    let um = r.utilization.iter().sum::<f64>() / n;
    let slope: f64 = r.utilization.iter().enumerate().map(|(t, u)| (t as f64 - tm) * (u - um)).sum::<f64>()
        / r.utilization.iter().enumerate().map(|(t, _)| (t as f64 - tm).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "slope {slope}, {:?}", r.utilization);
    let pairs = paired_costs_csv(&r, &r).unwrap();
    assert_eq!(pairs.lines().count(), 5001);
}

#[test]
fn sweep_endpoints_trend() {
    let case = bundled("case14_dne.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let t = sweep(&case, &amb, &[1.0, 38_000.0], &SolveConfig::default(), None, &PenaltyConfig::default(), Execution::default()).unwrap();
    let (a, b) = (&t.rows[0], &t.rows[1]);
    assert!(b.dispatch_cost > a.dispatch_cost);
    assert!(b.u >= a.u);
    assert!(nesting_fraction(a, b, 1e-6) >= 0.9);
    assert!(t.ranges_csv().lines().count() == 1 + 2 * 24);
}

#[test]
fn single_point_sweep_matches_direct_solve() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let set = sample_gaussian(&amb, 500, 9).unwrap();
    let pen = PenaltyConfig::default();
    let t = sweep(&case, &amb, &[2500.0], &SolveConfig::default(), Some(&set), &pen, Execution::Sequential).unwrap();
    let direct = solve(&case, &amb, 2500.0);
    let report = evaluate(&direct, &case, &set, &pen, Execution::Sequential).unwrap();
    let row = &t.rows[0];
    assert_eq!(row.dispatch_cost, direct.objective.dispatch_cost);
    assert_eq!(row.u, direct.u);
    assert_eq!(row.utilization, report.utilization);
    assert_eq!(row.ranges, direct.admissible_range(&amb));
}

#[test]
fn infeasible_floor_is_reported() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap().scaled(10.0).unwrap();
    let err = solve_drco(&case, &amb, &SolveConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Solve { .. }), "{err}");
    let t = sweep(&case, &amb, &[1.0, 2.0], &SolveConfig::default(), None, &PenaltyConfig::default(), Execution::Sequential).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert!(t.rows.iter().all(|r| !r.is_optimal() && r.status.contains("infeasible")));
}

#[test]
fn expected_cost_terms_shrink_with_weight() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let run = |dm: f64| {
        let cfg = SolveConfig {
            delta: 1000.0,
            extension: Some(ExtensionConfig { delta_plus: 50.0, delta_minus: dm, segments: 16, ..ExtensionConfig::default() }),
            ..SolveConfig::default()
        };
        solve_drco(&case, &amb, &cfg).unwrap()
    };
    let (a, b) = (run(10.0), run(200.0));
    assert!(a.verification.as_ref().unwrap().pass && b.verification.as_ref().unwrap().pass);
    assert!(b.objective.total >= a.objective.total - 1e-6);
    let (pa, pb) = (a.objective.expected_minus_term / 10.0, b.objective.expected_minus_term / 200.0);
    assert!(pb <= pa + 1e-6, "P⁻ {pa} → {pb}");
}

#[test]
fn solution_text_round_trip() {
    let case = bundled("case2.m");
    let amb = AmbiguitySet::preset(&case).unwrap();
    let sol = solve(&case, &amb, 10_000.0);
    let back = DneSolution::from_text(&sol.to_text()).unwrap();
    assert_eq!(back.p_hat, sol.p_hat);
    assert_eq!(back.eps_l, sol.eps_l);
    assert_eq!(back.b_coef, sol.b_coef);
    assert_eq!(back.u, sol.u);
}
