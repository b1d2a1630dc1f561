//! Out-of-sample scoring of DNE solutions and the fixed-dispatch baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conic::{self, LinExpr, SolverSettings};
use crate::drco::{extract_solution, CostEncoding, DneSolution, DrcoModel, ZERO_WIDTH};
use crate::error::{Error, Result};
use crate::grid::GridCase;
use crate::parallel::Execution;
use crate::uncertainty::{gauss_threshold, AmbiguitySet, ScenarioSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    /// $/MW of load shed when ε falls below ε^L.
    pub shed_price: f64,
    /// $/MW of renewable output curtailed when ε exceeds ε^U.
    pub curtail_price: f64,
    /// Multiplier on the fuel-cost change caused by re-dispatch (1 = plain fuel cost).
    pub redispatch_premium: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { shed_price: 2000.0, curtail_price: 100.0, redispatch_premium: 1.0 }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shed_price >= 0.0) || !(self.curtail_price >= 0.0) || !(self.redispatch_premium >= 0.0) {
            return Err(Error::Config("penalty prices must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    /// Per-scenario actual cost, $.
    pub costs: Vec<f64>,
    /// Per-scenario shed volume, MW.
    pub shed: Vec<f64>,
    /// Per-scenario curtailed volume, MW.
    pub curtailed: Vec<f64>,
    pub avg_cost: f64,
    pub max_cost: f64,
    pub avg_shed: f64,
    pub avg_curtail: f64,
    /// Fraction of scenarios with every ε_kt inside the box, per period.
    pub utilization: Vec<f64>,
    pub scenarios: usize,
    pub seed: u64,
    /// Largest violation of the re-dispatch constraints at the clipped deviations, MW.
    pub max_policy_residual: f64,
}

impl EvaluationReport {
    pub fn min_utilization(&self) -> f64 {
        self.utilization.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "AvgC,MaxC,AvgLS,AvgWC,min_utilization,scenarios,seed\n{},{},{},{},{},{},{}\n",
            self.avg_cost,
            self.max_cost,
            self.avg_shed,
            self.avg_curtail,
            self.min_utilization(),
            self.scenarios,
            self.seed
        )
    }

    pub fn scenarios_csv(&self) -> String {
        let mut s = String::from("scenario,cost,shed,curtailed\n");
        for j in 0..self.scenarios {
            let _ = writeln!(s, "{},{},{},{}", j + 1, self.costs[j], self.shed[j], self.curtailed[j]);
        }
        s
    }

    pub fn utilization_csv(&self) -> String {
        let mut s = String::from("period,utilization\n");
        for (t, u) in self.utilization.iter().enumerate() {
            let _ = writeln!(s, "{},{u}", t + 1);
        }
        s
    }
}

/// Per-scenario cost pairs of two reports over the same scenario set.
pub fn paired_costs_csv(a: &EvaluationReport, b: &EvaluationReport) -> Result<String> {
    if a.scenarios != b.scenarios {
        return Err(Error::Config("reports cover different scenario counts".into()));
    }
    let mut s = String::from("scenario,cost_a,cost_b\n");
    for j in 0..a.scenarios {
        let _ = writeln!(s, "{},{},{}", j + 1, a.costs[j], b.costs[j]);
    }
    Ok(s)
}

fn check_shapes(solution: &DneSolution, case: &GridCase) -> Result<()> {
    if solution.p_hat.len() != case.generators.len()
        || solution.eps_l.len() != case.renewables.len()
        || solution.periods() != case.periods()
    {
        return Err(Error::Config("solution shape does not match the case".into()));
    }
    Ok(())
}

/// Largest violation (MW) of balance, line, capacity, ramp and window
/// constraints by the affine re-dispatch at deviations `eps[k][t]`.
pub fn policy_residual(case: &GridCase, solution: &DneSolution, eps: &[Vec<f64>]) -> f64 {
    let (ni, nt) = (case.generators.len(), case.periods());
    let p: Vec<Vec<f64>> = (0..ni)
        .map(|i| (0..nt).map(|t| solution.redispatch(i, t, |k| eps[k][t])).collect())
        .collect();
    let mut worst: f64 = 0.0;
    let (dd, dr) = (case.time.dispatch_minutes, case.time.response_minutes);
    for t in 0..nt {
        let wind: Vec<f64> = case.renewables.iter().enumerate().map(|(k, w)| w.forecast[t] + eps[k][t]).collect();
        let gen_total: f64 = (0..ni).map(|i| p[i][t]).sum();
        worst = worst.max((gen_total + wind.iter().sum::<f64>() - case.total_load(t)).abs());
        for l in case.limited_lines() {
            let mut flow = case.load_flow(l, t);
            flow += (0..ni).map(|i| case.gen_factor(i, l) * p[i][t]).sum::<f64>();
            flow += wind.iter().enumerate().map(|(k, w)| case.renewable_factor(k, l) * w).sum::<f64>();
            worst = worst.max(flow.abs() - case.lines[l].capacity);
        }
        for (i, g) in case.generators.iter().enumerate() {
            worst = worst.max(p[i][t] - g.p_max).max(g.p_min - p[i][t]);
            let d = p[i][t] - solution.p_hat[i][t];
            worst = worst.max(d - g.ramp_up * dr).max(-d - g.ramp_down * dr);
            let prev = if t == 0 { g.initial } else { Some(p[i][t - 1]) };
            if let Some(prev) = prev {
                let step = p[i][t] - prev;
                worst = worst.max(step - g.ramp_up * dd).max(-step - g.ramp_down * dd);
            }
        }
    }
    worst
}

/// Scores a solution against a scenario set.
pub fn evaluate(
    solution: &DneSolution,
    case: &GridCase,
    scenarios: &ScenarioSet,
    penalties: &PenaltyConfig,
    exec: Execution,
) -> Result<EvaluationReport> {
    penalties.validate()?;
    check_shapes(solution, case)?;
    let (nk, nt) = (case.renewables.len(), case.periods());
    if scenarios.is_empty() {
        return Err(Error::Config("empty scenario set".into()));
    }
    if scenarios.shape() != (nk, nt) && nk > 0 {
        return Err(Error::Config(format!(
            "scenario shape {:?} does not match K={nk}, T={nt}",
            scenarios.shape()
        )));
    }
    let base_cost: f64 = case
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| (0..nt).map(|t| g.cost.eval(solution.p_hat[i][t])).sum::<f64>())
        .sum();

    struct Outcome {
        cost: f64,
        shed: f64,
        curtailed: f64,
        inside: Vec<bool>,
        residual: f64,
    }
    let outcomes = exec.map(scenarios.len(), |j| {
        let eps = &scenarios.scenarios[j];
        let mut clipped = vec![vec![0.0; nt]; nk];
        let (mut shed, mut curtailed) = (0.0, 0.0);
        let mut inside = vec![true; nt];
        for k in 0..nk {
            for t in 0..nt {
                let (lo, hi, e) = (solution.eps_l[k][t], solution.eps_u[k][t], eps[k][t]);
                shed += (lo - e).max(0.0);
                curtailed += (e - hi).max(0.0);
                if e < lo || e > hi {
                    inside[t] = false;
                }
                clipped[k][t] = e.clamp(lo, hi);
            }
        }
        let fuel: f64 = case
            .generators
            .iter()
            .enumerate()
            .map(|(i, g)| (0..nt).map(|t| g.cost.eval(solution.redispatch(i, t, |k| clipped[k][t]))).sum::<f64>())
            .sum();
        let cost = base_cost
            + penalties.redispatch_premium * (fuel - base_cost)
            + penalties.shed_price * shed
            + penalties.curtail_price * curtailed;
        let residual = policy_residual(case, solution, &clipped);
        Outcome { cost, shed, curtailed, inside, residual }
    });

    let n = outcomes.len();
    let costs: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
    let shed: Vec<f64> = outcomes.iter().map(|o| o.shed).collect();
    let curtailed: Vec<f64> = outcomes.iter().map(|o| o.curtailed).collect();
    let utilization = (0..nt)
        .map(|t| outcomes.iter().filter(|o| o.inside[t]).count() as f64 / n as f64)
        .collect();
    let max_policy_residual = outcomes.iter().map(|o| o.residual).fold(0.0, f64::max);
    Ok(EvaluationReport {
        avg_cost: costs.iter().sum::<f64>() / n as f64,
        max_cost: costs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        avg_shed: shed.iter().sum::<f64>() / n as f64,
        avg_curtail: curtailed.iter().sum::<f64>() / n as f64,
        costs,
        shed,
        curtailed,
        utilization,
        scenarios: n,
        seed: scenarios.seed,
        max_policy_residual,
    })
}

/// As [`evaluate`], failing when the clipped re-dispatch violates a constraint by more than `tol` MW.
pub fn evaluate_checked(
    solution: &DneSolution,
    case: &GridCase,
    scenarios: &ScenarioSet,
    penalties: &PenaltyConfig,
    exec: Execution,
    tol: f64,
) -> Result<EvaluationReport> {
    let report = evaluate(solution, case, scenarios, penalties, exec)?;
    if report.max_policy_residual > tol {
        return Err(Error::RobustFeasibility(format!(
            "clipped re-dispatch violates a constraint by {:.3e} MW",
            report.max_policy_residual
        )));
    }
    Ok(report)
}

/// Uniform draws inside the DNE box.
pub fn sample_in_box(solution: &DneSolution, n: usize, seed: u64) -> ScenarioSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenarios = (0..n)
        .map(|_| {
            solution
                .eps_l
                .iter()
                .zip(&solution.eps_u)
                .map(|(lo, hi)| lo.iter().zip(hi).map(|(&a, &b)| a + (b - a) * rng.random::<f64>()).collect())
                .collect()
        })
        .collect();
    ScenarioSet { scenarios, seed, descriptor: format!("uniform-in-box n={n}") }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustReport {
    /// Largest worst-case violation over all inequality rows, MW.
    pub max_violation: f64,
    pub worst_row: String,
    /// Worst-case magnitude of the balance mismatch over the box, MW.
    pub max_balance: f64,
    pub rows: usize,
}

/// An inequality `a + Σ_j c_j ε_j ≤ 0` in deviation space.
struct Row {
    a: f64,
    coef: Vec<(usize, usize, f64)>,
}

impl Row {
    fn worst(&self, s: &DneSolution) -> f64 {
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(k, t, c) in &self.coef {
            *merged.entry((k, t)).or_default() += c;
        }
        self.a + merged.iter().map(|(&(k, t), &c)| (c * s.eps_u[k][t]).max(c * s.eps_l[k][t])).sum::<f64>()
    }

    fn negated(&self) -> Row {
        Row { a: -self.a, coef: self.coef.iter().map(|&(k, t, c)| (k, t, -c)).collect() }
    }
}

/// Analytic worst case of every re-dispatch constraint over `[ε^L, ε^U]`.
pub fn verify_robust(solution: &DneSolution, case: &GridCase) -> Result<RobustReport> {
    check_shapes(solution, case)?;
    let (ni, nk, nt) = (case.generators.len(), case.renewables.len(), case.periods());
    let (dd, dr) = (case.time.dispatch_minutes, case.time.response_minutes);
    // p_it(ε) = base[i][t] + Σ_k B_ikt ε_kt.
    let base: Vec<Vec<f64>> = (0..ni)
        .map(|i| (0..nt).map(|t| solution.redispatch(i, t, |_| 0.0)).collect())
        .collect();
    let policy = |i: usize, t: usize, scale: f64, coef: &mut Vec<(usize, usize, f64)>| {
        for k in 0..nk {
            let b = solution.b_coef[i][k][t];
            if b != 0.0 {
                coef.push((k, t, scale * b));
            }
        }
    };
    let mut report = RobustReport { max_violation: f64::NEG_INFINITY, worst_row: String::new(), max_balance: 0.0, rows: 0 };
    let check = |name: String, row: Row, report: &mut RobustReport| {
        let v = row.worst(solution);
        report.rows += 1;
        if v > report.max_violation {
            report.max_violation = v;
            report.worst_row = name;
        }
    };

    for t in 0..nt {
        // Balance: Σ_i p_it(ε) + Σ_k (ŵ + ε) − D, an equality; its box extremes in both directions.
        let mut bal = Row { a: case.total_forecast(t) - case.total_load(t), coef: Vec::new() };
        for i in 0..ni {
            bal.a += base[i][t];
            policy(i, t, 1.0, &mut bal.coef);
        }
        for k in 0..nk {
            bal.coef.push((k, t, 1.0));
        }
        let mag = bal.worst(solution).max(bal.negated().worst(solution));
        report.max_balance = report.max_balance.max(mag);

        for l in case.limited_lines() {
            let mut row = Row { a: case.load_flow(l, t), coef: Vec::new() };
            for (k, w) in case.renewables.iter().enumerate() {
                let f = case.renewable_factor(k, l);
                row.a += f * w.forecast[t];
                row.coef.push((k, t, f));
            }
            for i in 0..ni {
                let f = case.gen_factor(i, l);
                row.a += f * base[i][t];
                policy(i, t, f, &mut row.coef);
            }
            let cap = case.lines[l].capacity;
            let neg = Row { a: -row.a - cap, coef: row.coef.iter().map(|&(k, tt, c)| (k, tt, -c)).collect() };
            row.a -= cap;
            check(format!("line[{l}] t={} up", t + 1), row, &mut report);
            check(format!("line[{l}] t={} down", t + 1), neg, &mut report);
        }
        for (i, g) in case.generators.iter().enumerate() {
            let mut p = Row { a: base[i][t], coef: Vec::new() };
            policy(i, t, 1.0, &mut p.coef);
            check(format!("gen[{i}] t={} p_max", t + 1), Row { a: p.a - g.p_max, coef: p.coef.clone() }, &mut report);
            let mut lo = p.negated();
            lo.a += g.p_min;
            check(format!("gen[{i}] t={} p_min", t + 1), lo, &mut report);
            let d = Row { a: p.a - solution.p_hat[i][t], coef: p.coef.clone() };
            if g.ramp_up.is_finite() {
                check(format!("gen[{i}] t={} window up", t + 1), Row { a: d.a - g.ramp_up * dr, coef: d.coef.clone() }, &mut report);
            }
            if g.ramp_down.is_finite() {
                let mut w = d.negated();
                w.a -= g.ramp_down * dr;
                check(format!("gen[{i}] t={} window down", t + 1), w, &mut report);
            }
            let prev = if t == 0 {
                g.initial.map(|p0| Row { a: p0, coef: Vec::new() })
            } else {
                let mut r = Row { a: base[i][t - 1], coef: Vec::new() };
                policy(i, t - 1, 1.0, &mut r.coef);
                Some(r)
            };
            if let Some(prev) = prev {
                let mut step = Row { a: p.a - prev.a, coef: p.coef.clone() };
                step.coef.extend(prev.coef.iter().map(|&(k, tt, c)| (k, tt, -c)));
                if g.ramp_up.is_finite() {
                    check(format!("gen[{i}] t={} ramp up", t + 1), Row { a: step.a - g.ramp_up * dd, coef: step.coef.clone() }, &mut report);
                }
                if g.ramp_down.is_finite() {
                    let mut r = step.negated();
                    r.a -= g.ramp_down * dd;
                    check(format!("gen[{i}] t={} ramp down", t + 1), r, &mut report);
                }
            }
        }
    }
    if report.rows == 0 {
        report.max_violation = 0.0;
    }
    Ok(report)
}

/// Worst-case utilization implied by a box under the per-(k,t) Gauss bound
/// and the union bound over k: `min_t (1 − Σ_k 4/(9λ_kt²))`, floored at 0.
pub fn implied_utilization(ambiguity: &AmbiguitySet, eps_l: &[Vec<f64>], eps_u: &[Vec<f64>]) -> f64 {
    let nt = ambiguity.periods();
    (0..nt)
        .map(|t| {
            let miss: f64 = (0..ambiguity.renewables())
                .map(|k| {
                    let (mu, sigma) = (ambiguity.mean[k][t], ambiguity.std[k][t]);
                    let lambda = (mu - eps_l[k][t]).min(eps_u[k][t] - mu) / sigma;
                    if lambda >= gauss_threshold() {
                        4.0 / (9.0 * lambda * lambda)
                    } else {
                        1.0
                    }
                })
                .sum();
            (1.0 - miss).max(0.0)
        })
        .fold(1.0, f64::min)
}

/// Least-cost dispatch without uncertainty: `(p̂[i][t], dispatch cost)`.
pub fn solve_nominal_ed(case: &GridCase, settings: &SolverSettings) -> Result<(Vec<Vec<f64>>, f64)> {
    let empty = AmbiguitySet::preset(case)?;
    let mut model = DrcoModel::new(case, &empty, vec![false; case.generators.len()])?;
    model.build_nominal_ed();
    model.build_objective(0.0, CostEncoding::SocEpigraph)?;
    let program = std::mem::take(&mut model.builder).build()?;
    let sol = conic::solve(&program, settings)?;
    if !sol.is_optimal() {
        return Err(Error::Solve { status: sol.status, diagnostics: format!("nominal dispatch: {}", sol.diagnostics) });
    }
    let p: Vec<Vec<f64>> = model.map.p_hat.iter().map(|r| r.iter().map(|v| sol.value(*v)).collect()).collect();
    let cost = case
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| p[i].iter().map(|&x| g.cost.eval(x)).sum::<f64>())
        .sum();
    Ok((p, cost))
}

/// Fixed-dispatch baseline: `p̂` at the least-cost dispatch, uniform AGC
/// participation `B = −1/|AGC|`, `b = 0`, widest total box `Σ(ε^U − ε^L)`.
pub fn solve_odne_baseline(
    case: &GridCase,
    ambiguity: &AmbiguitySet,
    agc: Option<&[bool]>,
    settings: &SolverSettings,
) -> Result<DneSolution> {
    let (mut p_fixed, _) = solve_nominal_ed(case, settings)?;
    for (row, g) in p_fixed.iter_mut().zip(&case.generators) {
        for p in row.iter_mut() {
            *p = p.clamp(g.p_min, g.p_max);
        }
    }
    let mask: Vec<bool> = match agc {
        Some(m) => m.to_vec(),
        None => case.generators.iter().map(|g| g.agc).collect(),
    };
    let n_agc = mask.iter().filter(|&&a| a).count();
    let mut model = DrcoModel::new(case, ambiguity, mask)?;
    let (ni, nk, nt) = (case.generators.len(), case.renewables.len(), case.periods());
    if n_agc == 0 && nk > 0 {
        for k in 0..nk {
            for t in 0..nt {
                model.builder.add_eq(LinExpr::var(model.map.eps_u[k][t]).term(model.map.eps_l[k][t], -1.0));
            }
        }
    }
    for i in 0..ni {
        for t in 0..nt {
            let v = model.map.p_hat[i][t];
            model.builder.fix(v, p_fixed[i][t]);
        }
        for k in 0..nk {
            for t in 0..nt {
                if let (Some(s), Some(s0)) = (model.map.s[i][k][t], model.map.s0[i][k][t]) {
                    let share = 1.0 / n_agc as f64;
                    // S = B E and s0 = B ε^L with B = −1/|AGC|.
                    let (el, eu) = (model.map.eps_l[k][t], model.map.eps_u[k][t]);
                    model.builder.add_eq(LinExpr::var(s).term(eu, share).term(el, -share));
                    model.builder.add_eq(LinExpr::var(s0).term(el, share));
                }
            }
        }
    }
    model.build_robust_box();
    for k in 0..nk {
        for t in 0..nt {
            model.builder.add_objective(model.map.eps_u[k][t], -1.0);
            model.builder.add_objective(model.map.eps_l[k][t], 1.0);
        }
    }
    let program = std::mem::take(&mut model.builder).build()?;
    let sol = conic::solve(&program, settings)?;
    if !sol.is_optimal() {
        return Err(Error::Solve { status: sol.status, diagnostics: format!("baseline: {}", sol.diagnostics) });
    }
    let mut out = extract_solution(&model, &sol, 0.0, 0.0);
    // The dispatch is given, not optimized; report it exactly and keep the policy uniform.
    out.p_hat = p_fixed;
    for i in 0..ni {
        for k in 0..nk {
            for t in 0..nt {
                if model.agc[i] && out.eps_u[k][t] - out.eps_l[k][t] >= ZERO_WIDTH {
                    out.b_coef[i][k][t] = -1.0 / n_agc as f64;
                    out.b_const[i][k][t] = 0.0;
                }
            }
        }
    }
    out.objective.dispatch_cost = case
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| out.p_hat[i].iter().map(|&x| g.cost.eval(x)).sum::<f64>())
        .sum();
    out.u = implied_utilization(ambiguity, &out.eps_l, &out.eps_u);
    out.verification = Some(conic::verify(&program, &sol.primal, 1e-6));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drco::ObjectiveBreakdown;
    use crate::conic::SolveStatus;
    use crate::grid::parse_case;

    fn toy() -> (GridCase, DneSolution) {
        let case = parse_case(
            "mpc.time = [ 1 60 5 ];\nmpc.bus = [ 1 3 50 0 ];\nmpc.branch = [ ];\n\
             mpc.gen = [ 1 0 0 0 0 1 100 1 100 0 ];\nmpc.gencost = [ 2 0 0 2 2 0 ];\n\
             mpc.renewables = [ 1 0 30 ];\nmpc.forecast = [ 10 ];\n",
        )
        .unwrap();
        let sol = DneSolution {
            delta: 0.0,
            u0: 0.7,
            agc: vec![true],
            p_hat: vec![vec![40.0]],
            s: vec![vec![vec![-10.0]]],
            s0: vec![vec![vec![5.0]]],
            b_coef: vec![vec![vec![-1.0]]],
            b_const: vec![vec![vec![0.0]]],
            eps_l: vec![vec![-5.0]],
            eps_u: vec![vec![5.0]],
            u: 0.8,
            r: vec![],
            s_budget: vec![],
            z: vec![],
            objective: ObjectiveBreakdown::default(),
            status: SolveStatus::Optimal,
            solve_time: 0.0,
            iterations: 0,
            verification: None,
        };
        (case, sol)
    }

    fn set(eps: &[f64]) -> ScenarioSet {
        ScenarioSet { scenarios: eps.iter().map(|&e| vec![vec![e]]).collect(), seed: 0, descriptor: String::new() }
    }

    #[test]
    fn inside_box_has_no_penalty() {
        let (case, sol) = toy();
        let r = evaluate(&sol, &case, &set(&[0.0, 3.0, -4.0]), &PenaltyConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(r.avg_shed, 0.0);
        assert_eq!(r.avg_curtail, 0.0);
        assert_eq!(r.utilization, vec![1.0]);
        assert!(r.max_policy_residual < 1e-12);
    }

    #[test]
    fn shed_priced_at_default() {
        let (case, sol) = toy();
        let r = evaluate(&sol, &case, &set(&[-10.0]), &PenaltyConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(r.shed[0], 5.0);
        // Clipped to −5: unit covers 45 MW at 2 $/MW plus 5 MW shed at 2000 $/MW.
        assert!((r.costs[0] - (90.0 + 10_000.0)).abs() < 1e-9);
        assert_eq!(r.utilization, vec![0.0]);
    }

    #[test]
    fn widened_box_detected() {
        let (case, mut sol) = toy();
        assert!(verify_robust(&sol, &case).unwrap().max_violation <= 0.0);
        sol.eps_u[0][0] = 50.0;
        let r = verify_robust(&sol, &case).unwrap();
        assert!(r.max_violation > 0.0, "{r:?}");
    }
}
