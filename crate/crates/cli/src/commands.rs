use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};

use dne_core::drco::{solve_drco, DneSolution, ExtensionConfig, SolveConfig};
use dne_core::evaluation::{
    evaluate_checked, paired_costs_csv, solve_odne_baseline, verify_robust, EvaluationReport, PenaltyConfig,
};
use dne_core::expected_cost::{build_cpla, j_tau_many, j_tau_oracle, HVariant};
use dne_core::frontier::{reference_schedule, sweep};
use dne_core::grid::{load_series, parse_case, GridCase, SeriesTable};
use dne_core::parallel::Execution;
use dne_core::uncertainty::{calibrate, sample_gaussian, split_history, symmetric_grid, AmbiguitySet, ScenarioSet};

use crate::opts::{Opts, UsageError};

const CASE14: &str = include_str!("../../core/data/case14_dne.m");
const CASE2: &str = include_str!("../../core/data/case2.m");
const BACKEND: &str = "clarabel 0.11";
/// Largest clipped re-dispatch residual accepted during evaluation, MW.
const POLICY_TOL: f64 = 1e-6;

/// Writes the header-prefixed artifacts of one invocation.
pub struct Output<'a> {
    dir: &'a Path,
    header: String,
    timing: Vec<(String, f64)>,
    start: Instant,
}

impl<'a> Output<'a> {
    pub fn new(command: &str, opts: &'a Opts) -> Result<Self> {
        let dir = opts.out_dir();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let header = format!(
            "# dne {} ({BACKEND})\n# command: {command}\n# seed: {}\n# config-sha256: {}\n",
            env!("CARGO_PKG_VERSION"),
            opts.seed(),
            opts.hash(command)
        );
        Ok(Self { dir, header, timing: Vec::new(), start: Instant::now() })
    }

    pub fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, format!("{}{body}", self.header)).with_context(|| format!("writing {}", path.display()))
    }

    pub fn lap(&mut self, stage: &str, since: Instant) {
        self.timing.push((stage.into(), since.elapsed().as_secs_f64()));
    }

    /// Wall times go to their own file so the other artifacts stay reproducible.
    pub fn finish(mut self) -> Result<()> {
        let total = self.start;
        self.lap("total", total);
        let mut s = String::from("stage,seconds\n");
        for (stage, secs) in &self.timing {
            let _ = writeln!(s, "{stage},{secs:.6}");
        }
        self.write("timing.txt", &s)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        anyhow::Error::new(dne_core::Error::Io(e)).context(format!("reading {}", path.display()))
    })
}

pub fn load_case(o: &Opts) -> Result<GridCase> {
    let name = o.case.as_deref().unwrap_or("case14");
    let text = match name {
        "case14" => CASE14.to_string(),
        "case2" => CASE2.to_string(),
        path => read(Path::new(path))?,
    };
    let mut case = parse_case(&text).with_context(|| format!("parsing case {name}"))?;
    if let Some(f) = o.load_scale {
        case = case.scale_loads(f)?;
    }
    if let Some(f) = o.ramp_scale {
        case = case.with_ramp_fraction(f)?;
    }
    if let Some(path) = &o.forecast {
        let table = load_series(&read(path)?, Some(case.periods())).context("reading forecast")?;
        case = case.with_forecast(table.single()?)?;
    }
    Ok(case)
}

/// Moments from `--ambiguity`, else calibrated on the history split, else the preset.
/// Also returns the history test split when one exists.
pub fn load_ambiguity(o: &Opts, case: &GridCase) -> Result<(AmbiguitySet, Option<ScenarioSet>)> {
    let mut test = None;
    let amb = if let Some(path) = &o.ambiguity {
        AmbiguitySet::from_csv(&read(path)?).context("reading ambiguity table")?
    } else if let Some(path) = &o.history {
        let (train, held) = history_split(o, Some(case.periods()), path)?;
        test = Some(held);
        calibrate(&train)?
    } else {
        AmbiguitySet::preset(case)?
    };
    amb.check_shape(case)?;
    Ok((amb, test))
}

fn history_split(o: &Opts, periods: Option<usize>, path: &Path) -> Result<(Vec<Vec<Vec<f64>>>, ScenarioSet)> {
    let table = load_series(&read(path)?, periods).context("reading history")?;
    let (train, held) = split_history(&table.blocks, o.split.unwrap_or(0.5))?;
    let held = SeriesTable { columns: table.columns.clone(), blocks: held };
    let n = held.blocks.len();
    Ok((train, ScenarioSet::from_table(&held, o.seed(), format!("history test split n={n}"))))
}

fn scenarios(o: &Opts, amb: &AmbiguitySet, held: Option<ScenarioSet>) -> Result<ScenarioSet> {
    match held {
        Some(set) => Ok(set),
        None => Ok(sample_gaussian(amb, o.scenarios.unwrap_or(5000), o.seed())?),
    }
}

pub fn solve_config(o: &Opts) -> SolveConfig {
    let mut cfg = SolveConfig::default();
    if let Some(d) = o.delta {
        cfg.delta = d;
    }
    if let Some(u) = o.u0 {
        cfg.u0 = u;
    }
    if o.delta_plus.is_some() || o.delta_minus.is_some() {
        cfg.extension = Some(ExtensionConfig {
            delta_plus: o.delta_plus.unwrap_or(0.0),
            delta_minus: o.delta_minus.unwrap_or(0.0),
            segments: o.segments.unwrap_or(16),
            ..ExtensionConfig::default()
        });
    }
    cfg
}

fn penalties(o: &Opts) -> PenaltyConfig {
    let mut p = PenaltyConfig::default();
    if let Some(v) = o.shed_price {
        p.shed_price = v;
    }
    if let Some(v) = o.curtail_price {
        p.curtail_price = v;
    }
    p
}

fn summary(sol: &DneSolution, case: &GridCase, amb: &AmbiguitySet) -> Result<String> {
    let robust = verify_robust(sol, case)?;
    let ob = &sol.objective;
    let mut s = String::new();
    let _ = writeln!(s, "status: {}", sol.status);
    let _ = writeln!(s, "u* = {:.6}", sol.u);
    let _ = writeln!(s, "dispatch cost = {:.4} $", ob.dispatch_cost);
    let _ = writeln!(s, "delta = {}  u0 = {}", sol.delta, sol.u0);
    let _ = writeln!(s, "objective:");
    let _ = writeln!(s, "  dispatch           {:.4}", ob.dispatch_cost);
    let _ = writeln!(s, "  -delta*u           {:.4}", ob.utilization_term);
    let _ = writeln!(s, "  expected over-est  {:.4}", ob.expected_plus_term);
    let _ = writeln!(s, "  expected under-est {:.4}", ob.expected_minus_term);
    let _ = writeln!(s, "  total              {:.4}", ob.total);
    if let Some(v) = &sol.verification {
        let _ = writeln!(s, "residuals: {} ({})", v.summary(), if v.pass { "pass" } else { "FAIL" });
    }
    let _ = writeln!(
        s,
        "robust check: {} rows, max violation {:.3e} MW at {}, max balance {:.3e} MW",
        robust.rows, robust.max_violation, robust.worst_row, robust.max_balance
    );
    let _ = writeln!(s, "\nadmissible range, MW of total deviation from forecast");
    let _ = writeln!(s, "period,forecast,w_lower,w_upper");
    for (t, (lo, hi)) in sol.admissible_range(amb).iter().enumerate() {
        let _ = writeln!(s, "{},{:.4},{lo:.4},{hi:.4}", t + 1, case.total_forecast(t));
    }
    Ok(s)
}

pub fn solve(o: &Opts) -> Result<()> {
    let mut out = Output::new("solve", o)?;
    let t = Instant::now();
    let case = load_case(o)?;
    let (amb, _) = load_ambiguity(o, &case)?;
    out.lap("load", t);
    let t = Instant::now();
    let sol = solve_drco(&case, &amb, &solve_config(o))?;
    out.lap("solve", t);
    let text = summary(&sol, &case, &amb)?;
    print!("{text}");
    out.write("solution.csv", &sol.to_text())?;
    out.write("summary.txt", &text)?;
    out.finish()
}

pub fn sweep_cmd(o: &Opts) -> Result<()> {
    let mut out = Output::new("sweep", o)?;
    let t = Instant::now();
    let case = load_case(o)?;
    let (amb, held) = load_ambiguity(o, &case)?;
    let set = scenarios(o, &amb, held)?;
    out.lap("load", t);
    let schedule = o.deltas.clone().unwrap_or_else(reference_schedule);
    let t = Instant::now();
    let table = sweep(&case, &amb, &schedule, &solve_config(o), Some(&set), &penalties(o), Execution::default())?;
    out.lap("sweep", t);
    let failed = table.rows.iter().filter(|r| !r.is_optimal()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} δ points did not solve", table.rows.len());
    }
    let (dc, du) = table.monotonicity_violations();
    println!("{} points, {} optimal; largest cost drop {dc:.3e}, largest u* drop {du:.3e}", table.rows.len(), table.rows.len() - failed);
    out.write("frontier.csv", &table.rows_csv())?;
    out.write("ranges.csv", &table.ranges_csv())?;
    let mut s = table.timing_csv();
    s.insert_str(0, "# per-point wall time\n");
    out.write("sweep_timing.csv", &s)?;
    out.finish()
}

fn obtain_solution(o: &Opts, case: &GridCase, amb: &AmbiguitySet) -> Result<DneSolution> {
    match &o.solution {
        Some(path) => Ok(DneSolution::from_text(&read(path)?).context("reading solution")?),
        None => Ok(solve_drco(case, amb, &solve_config(o))?),
    }
}

fn report_line(name: &str, r: &EvaluationReport) -> String {
    format!(
        "{name}: AvgC {:.2}  MaxC {:.2}  AvgLS {:.4}  AvgWC {:.4}  min utilization {:.4}",
        r.avg_cost,
        r.max_cost,
        r.avg_shed,
        r.avg_curtail,
        r.min_utilization()
    )
}

pub fn evaluate_cmd(o: &Opts) -> Result<()> {
    let mut out = Output::new("evaluate", o)?;
    let t = Instant::now();
    let case = load_case(o)?;
    let (amb, held) = load_ambiguity(o, &case)?;
    let set = scenarios(o, &amb, held)?;
    out.lap("load", t);
    let t = Instant::now();
    let sol = obtain_solution(o, &case, &amb)?;
    out.lap("solve", t);
    let t = Instant::now();
    let report = evaluate_checked(&sol, &case, &set, &penalties(o), Execution::default(), POLICY_TOL)?;
    out.lap("evaluate", t);
    println!("{}", report_line("DNE", &report));
    out.write("report.csv", &report.summary_csv())?;
    out.write("scenarios.csv", &report.scenarios_csv())?;
    out.write("utilization.csv", &report.utilization_csv())?;
    out.finish()
}

pub fn baseline(o: &Opts) -> Result<()> {
    let mut out = Output::new("baseline", o)?;
    let t = Instant::now();
    let case = load_case(o)?;
    let (amb, held) = load_ambiguity(o, &case)?;
    let set = scenarios(o, &amb, held)?;
    out.lap("load", t);
    let cfg = solve_config(o);
    let t = Instant::now();
    let idne = obtain_solution(o, &case, &amb)?;
    out.lap("solve_idne", t);
    let t = Instant::now();
    let odne = solve_odne_baseline(&case, &amb, cfg.agc.as_deref(), &cfg.settings)?;
    out.lap("solve_odne", t);
    let t = Instant::now();
    let pen = penalties(o);
    let a = evaluate_checked(&idne, &case, &set, &pen, Execution::default(), POLICY_TOL)?;
    let b = evaluate_checked(&odne, &case, &set, &pen, Execution::default(), POLICY_TOL)?;
    out.lap("evaluate", t);
    println!("{}", report_line("IDNE", &a));
    println!("{}", report_line("ODNE", &b));
    let mut s = String::from("method,u_star,dispatch_cost,AvgC,MaxC,AvgLS,AvgWC,min_utilization\n");
    for (name, sol, r) in [("IDNE", &idne, &a), ("ODNE", &odne, &b)] {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{}",
            sol.u,
            sol.objective.dispatch_cost,
            r.avg_cost,
            r.max_cost,
            r.avg_shed,
            r.avg_curtail,
            r.min_utilization()
        );
    }
    out.write("comparison.csv", &s)?;
    out.write("paired_costs.csv", &paired_costs_csv(&a, &b)?)?;
    out.write("odne_solution.csv", &odne.to_text())?;
    out.write("idne_solution.csv", &idne.to_text())?;
    out.finish()
}

pub fn jtau(o: &Opts) -> Result<()> {
    let mut out = Output::new("jtau", o)?;
    let taus = o.tau.clone().unwrap_or_else(|| vec![0.0, 0.25, 0.5, 1.0, 2.0]);
    if let Some(bad) = taus.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(UsageError(format!("tau must be finite and nonnegative, got {bad}")).into());
    }
    let grid = symmetric_grid(o.grid_halfwidth.unwrap_or(10.0), o.grid.unwrap_or(2001));
    let tau_max = o.tau_max.unwrap_or(5.0).max(taus.iter().copied().fold(0.0, f64::max));
    let t = Instant::now();
    let conic = j_tau_many(&taus, Execution::default())?;
    out.lap("conic", t);
    let t = Instant::now();
    let oracle = taus.iter().map(|&x| j_tau_oracle(x, HVariant::Ratio, &grid)).collect::<Result<Vec<_>, _>>()?;
    out.lap("oracle", t);
    let t = Instant::now();
    let cpla = build_cpla(0.0, tau_max, o.segments.unwrap_or(16))?;
    out.lap("cpla", t);
    let mut s = String::from("tau,j_conic,j_oracle,cpla,gap\n");
    for (j, &x) in taus.iter().enumerate() {
        let _ = writeln!(s, "{x},{},{},{},{}", conic[j], oracle[j], cpla.value(x)?, conic[j] - oracle[j]);
    }
    print!("{s}");
    out.write("jtau.csv", &s)?;
    out.write("cpla.csv", &cpla.to_csv())?;
    out.finish()
}

pub fn calibrate_cmd(o: &Opts) -> Result<()> {
    let mut out = Output::new("calibrate", o)?;
    let Some(path) = &o.history else {
        return Err(UsageError("calibrate needs --history".into()).into());
    };
    let periods = match &o.case {
        Some(_) => Some(load_case(o)?.periods()),
        None => None,
    };
    let t = Instant::now();
    let (train, held) = history_split(o, periods, path)?;
    let amb = calibrate(&train)?;
    out.lap("calibrate", t);
    println!("{} calibration days, {} test days, {} renewables x {} periods", train.len(), held.len(), amb.renewables(), amb.periods());
    out.write("ambiguity.csv", &amb.to_csv())?;
    out.write("test_scenarios.csv", &held.to_table().to_csv())?;
    out.finish()
}
