//! δ sweeps: the cost-utilization frontier and admissible-range tables.

use std::fmt::Write as _;
use std::time::Instant;

use crate::drco::{solve_drco, DneSolution, SolveConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, PenaltyConfig};
use crate::grid::GridCase;
use crate::parallel::Execution;
use crate::uncertainty::{AmbiguitySet, ScenarioSet};

/// The 33-point schedule: 1, then steps of 100 to 1000, 400 to 5000, 1000 to 10000, 4000 to 38000.
pub fn reference_schedule() -> Vec<f64> {
    let mut s = vec![1.0];
    let mut d = 100.0;
    while d <= 38_000.0 {
        s.push(d);
        d += if d < 1000.0 {
            100.0
        } else if d < 5000.0 {
            400.0
        } else if d < 10_000.0 {
            1000.0
        } else {
            4000.0
        };
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierRow {
    pub delta: f64,
    /// `optimal`, or the error that ended this point.
    pub status: String,
    pub dispatch_cost: f64,
    pub u: f64,
    /// Per-period `[w^L_t, w^U_t]`, MW.
    pub ranges: Vec<(f64, f64)>,
    /// Per-period out-of-sample utilization, when scenarios were given.
    pub utilization: Vec<f64>,
    pub wall_time: f64,
    pub solution: Option<DneSolution>,
}

impl FrontierRow {
    pub fn is_optimal(&self) -> bool {
        self.solution.is_some()
    }

    pub fn min_utilization(&self) -> f64 {
        self.utilization.iter().copied().fold(f64::NAN, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrontierTable {
    pub rows: Vec<FrontierRow>,
}

impl FrontierTable {
    pub fn optimal_rows(&self) -> impl Iterator<Item = &FrontierRow> {
        self.rows.iter().filter(|r| r.is_optimal())
    }

    /// Largest decrease of dispatch cost and of u* between consecutive optimal rows.
    pub fn monotonicity_violations(&self) -> (f64, f64) {
        let rows: Vec<&FrontierRow> = self.optimal_rows().collect();
        let mut worst = (0.0f64, 0.0f64);
        for w in rows.windows(2) {
            worst.0 = worst.0.max(w[0].dispatch_cost - w[1].dispatch_cost);
            worst.1 = worst.1.max(w[0].u - w[1].u);
        }
        worst
    }

    pub fn rows_csv(&self) -> String {
        let periods = self.rows.iter().map(|r| r.ranges.len()).max().unwrap_or(0);
        let mut s = String::from("delta,status,dispatch_cost,u_star,min_utilization");
        for t in 1..=periods {
            let _ = write!(s, ",utilization_t{t}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{}",
                r.delta,
                r.status.replace(',', ";"),
                r.dispatch_cost,
                r.u,
                r.min_utilization()
            );
            for t in 0..periods {
                let _ = write!(s, ",{}", r.utilization.get(t).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    /// Wall times, kept apart from the reproducible tables.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("delta,wall_time_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.delta, r.wall_time);
        }
        s
    }

    pub fn ranges_csv(&self) -> String {
        let mut s = String::from("delta,period,w_lower,w_upper\n");
        for r in &self.rows {
            for (t, (lo, hi)) in r.ranges.iter().enumerate() {
                let _ = writeln!(s, "{},{},{lo},{hi}", r.delta, t + 1);
            }
        }
        s
    }
}

fn solve_point(
    case: &GridCase,
    ambiguity: &AmbiguitySet,
    delta: f64,
    base: &SolveConfig,
    scenarios: Option<&ScenarioSet>,
    penalties: &PenaltyConfig,
) -> FrontierRow {
    let start = Instant::now();
    let cfg = SolveConfig { delta, ..base.clone() };
    let outcome = solve_drco(case, ambiguity, &cfg).and_then(|sol| {
        let utilization = match scenarios {
            Some(sc) => evaluate(&sol, case, sc, penalties, Execution::Sequential)?.utilization,
            None => Vec::new(),
        };
        Ok((sol, utilization))
    });
    let wall_time = start.elapsed().as_secs_f64();
    match outcome {
        Ok((sol, utilization)) => FrontierRow {
            delta,
            status: sol.status.to_string(),
            dispatch_cost: sol.objective.dispatch_cost,
            u: sol.u,
            ranges: sol.admissible_range(ambiguity),
            utilization,
            wall_time,
            solution: Some(sol),
        },
        Err(e) => FrontierRow {
            delta,
            status: e.to_string(),
            dispatch_cost: f64::NAN,
            u: f64::NAN,
            ranges: Vec::new(),
            utilization: Vec::new(),
            wall_time,
            solution: None,
        },
    }
}

/// One solve (and evaluation, if `scenarios` is given) per δ. Failed points
/// are kept as rows carrying their error.
pub fn sweep(
    case: &GridCase,
    ambiguity: &AmbiguitySet,
    schedule: &[f64],
    base: &SolveConfig,
    scenarios: Option<&ScenarioSet>,
    penalties: &PenaltyConfig,
    exec: Execution,
) -> Result<FrontierTable> {
    if schedule.is_empty() {
        return Err(Error::Config("empty δ schedule".into()));
    }
    if schedule.iter().any(|d| !d.is_finite() || *d < 0.0) || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("δ schedule must be finite, nonnegative and strictly increasing".into()));
    }
    base.validate()?;
    penalties.validate()?;
    let rows = exec.map(schedule.len(), |j| solve_point(case, ambiguity, schedule[j], base, scenarios, penalties));
    Ok(FrontierTable { rows })
}

/// Fraction of periods whose range at `wide` contains the range at `narrow`.
pub fn nesting_fraction(narrow: &FrontierRow, wide: &FrontierRow, tol: f64) -> f64 {
    let n = narrow.ranges.len().min(wide.ranges.len());
    if n == 0 {
        return 0.0;
    }
    let nested = narrow
        .ranges
        .iter()
        .zip(&wide.ranges)
        .filter(|((nl, nu), (wl, wu))| *wl <= nl + tol && *wu >= nu - tol)
        .count();
    nested as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_has_33_points() {
        let s = reference_schedule();
        assert_eq!(s.len(), 33);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[10], 1000.0);
        assert_eq!(s[20], 5000.0);
        assert_eq!(s[25], 10_000.0);
        assert_eq!(*s.last().unwrap(), 38_000.0);
        assert!(s.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rejects_unsorted_schedule() {
        let case = crate::grid::parse_case(
            "mpc.time = [ 1 60 5 ];\nmpc.bus = [ 1 3 50 0 ];\nmpc.branch = [ ];\n\
             mpc.gen = [ 1 0 0 0 0 1 100 1 100 0 ];\nmpc.gencost = [ 2 0 0 2 2 0 ];\n",
        )
        .unwrap();
        let amb = AmbiguitySet::new(vec![], vec![]).unwrap();
        let r = sweep(&case, &amb, &[5.0, 1.0], &SolveConfig::default(), None, &PenaltyConfig::default(), Execution::Sequential);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
