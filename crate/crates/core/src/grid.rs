//! Test-system data: network, thermal units, renewables and the time grid.
//!
//! Cases are read from a MATPOWER-style text subset (see [`parse_case`]) and
//! validated on construction. Line flows follow the `from → to` orientation:
//! a positive flow runs from the `from` bus to the `to` bus, and the shift
//! factor `f[n][l]` is the flow on line `l` caused by injecting 1 MW at bus
//! `n` and withdrawing it at the slack bus.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum CostCurve {
    Linear { c0: f64, c1: f64 },
    Quadratic { c0: f64, c1: f64, c2: f64 },
    /// Breakpoints `(MW, $)` with nondecreasing slopes; extrapolated linearly.
    PiecewiseLinear { points: Vec<(f64, f64)> },
}

impl CostCurve {
    pub fn eval(&self, p: f64) -> f64 {
        match self {
            CostCurve::Linear { c0, c1 } => c0 + c1 * p,
            CostCurve::Quadratic { c0, c1, c2 } => c0 + c1 * p + c2 * p * p,
            CostCurve::PiecewiseLinear { points } => {
                let seg = points
                    .windows(2)
                    .position(|w| p <= w[1].0)
                    .unwrap_or(points.len() - 2);
                let (a, b) = (points[seg], points[seg + 1]);
                a.1 + (b.1 - a.1) / (b.0 - a.0) * (p - a.0)
            }
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        match self {
            CostCurve::Linear { .. } => Ok(()),
            CostCurve::Quadratic { c2, .. } => {
                if *c2 < 0.0 {
                    Err(Error::invariant(path, "quadratic cost coefficient is negative (non-convex)"))
                } else {
                    Ok(())
                }
            }
            CostCurve::PiecewiseLinear { points } => {
                if points.len() < 2 {
                    return Err(Error::invariant(path, "piecewise-linear cost needs at least 2 points"));
                }
                let mut last_slope = f64::NEG_INFINITY;
                for w in points.windows(2) {
                    let dx = w[1].0 - w[0].0;
                    if dx <= 0.0 {
                        return Err(Error::invariant(path, "piecewise-linear breakpoints must increase"));
                    }
                    let slope = (w[1].1 - w[0].1) / dx;
                    if slope < last_slope - 1e-12 {
                        return Err(Error::invariant(path, "piecewise-linear slopes must be nondecreasing"));
                    }
                    last_slope = slope;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    /// Load per period, MW.
    pub load: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series reactance, p.u.
    pub reactance: f64,
    /// Off-nominal tap ratio (1 for plain lines).
    pub tap: f64,
    /// Thermal limit, MW. `f64::INFINITY` when unconstrained.
    pub capacity: f64,
}

impl Line {
    pub fn susceptance(&self) -> f64 {
        1.0 / (self.reactance * self.tap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    /// MW/min.
    pub ramp_up: f64,
    /// MW/min.
    pub ramp_down: f64,
    pub cost: CostCurve,
    pub agc: bool,
    /// Dispatch preceding period 1, when known.
    pub initial: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Renewable {
    pub bus: usize,
    pub w_min: f64,
    pub w_max: f64,
    /// Forecast output per period, MW.
    pub forecast: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub periods: usize,
    pub dispatch_minutes: f64,
    pub response_minutes: f64,
}

/// Node × line sensitivity table.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftFactors {
    /// `factors[n][l]`, `n` a bus position (not id).
    pub factors: Vec<Vec<f64>>,
}

impl ShiftFactors {
    pub fn get(&self, bus_pos: usize, line: usize) -> f64 {
        self.factors[bus_pos][line]
    }

    /// Flow on every line for a nodal injection vector (by bus position).
    pub fn flows(&self, injection: &[f64]) -> Vec<f64> {
        let lines = self.factors.first().map_or(0, Vec::len);
        (0..lines)
            .map(|l| injection.iter().enumerate().map(|(n, p)| p * self.factors[n][l]).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub renewables: Vec<Renewable>,
    pub time: TimeGrid,
    /// Slack bus id.
    pub slack: usize,
    pub shift_factors: ShiftFactors,
}

impl GridCase {
    /// Validates the raw parts and computes shift factors.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        lines: Vec<Line>,
        generators: Vec<Generator>,
        renewables: Vec<Renewable>,
        time: TimeGrid,
        slack: Option<usize>,
    ) -> Result<Self> {
        let slack = match slack {
            Some(s) => s,
            None => generators
                .first()
                .map(|g| g.bus)
                .ok_or_else(|| Error::invariant("slack", "no slack bus designated and no generator to default to"))?,
        };
        let mut case = GridCase {
            name: name.into(),
            base_mva,
            buses,
            lines,
            generators,
            renewables,
            time,
            slack,
            shift_factors: ShiftFactors { factors: Vec::new() },
        };
        case.validate()?;
        case.shift_factors = compute_shift_factors(&case)?;
        Ok(case)
    }

    pub fn periods(&self) -> usize {
        self.time.periods
    }

    pub fn bus_position(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    fn pos(&self, id: usize) -> usize {
        self.bus_position(id).expect("bus ids are validated on construction")
    }

    /// Shift factor of generator `i`'s bus on line `l`.
    pub fn gen_factor(&self, i: usize, l: usize) -> f64 {
        self.shift_factors.get(self.pos(self.generators[i].bus), l)
    }

    /// Shift factor of renewable `k`'s bus on line `l`.
    pub fn renewable_factor(&self, k: usize, l: usize) -> f64 {
        self.shift_factors.get(self.pos(self.renewables[k].bus), l)
    }

    /// Flow on line `l` at period `t` caused by loads alone (`Σ_n f_nl·(−d_nt)`).
    pub fn load_flow(&self, l: usize, t: usize) -> f64 {
        self.buses
            .iter()
            .enumerate()
            .map(|(n, b)| -self.shift_factors.get(n, l) * b.load[t])
            .sum()
    }

    pub fn total_load(&self, t: usize) -> f64 {
        self.buses.iter().map(|b| b.load[t]).sum()
    }

    pub fn total_forecast(&self, t: usize) -> f64 {
        self.renewables.iter().map(|w| w.forecast[t]).sum()
    }

    /// Lines with a finite thermal limit.
    pub fn limited_lines(&self) -> impl Iterator<Item = usize> + '_ {
        self.lines.iter().enumerate().filter(|(_, l)| l.capacity.is_finite()).map(|(i, _)| i)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.time.periods;
        if t == 0 {
            return Err(Error::invariant("time.periods", "must be at least 1"));
        }
        if !(self.time.dispatch_minutes > 0.0) || !(self.time.response_minutes > 0.0) {
            return Err(Error::invariant("time", "dispatch and response windows must be positive"));
        }
        if self.buses.is_empty() {
            return Err(Error::invariant("bus", "case has no buses"));
        }
        let mut seen = HashMap::new();
        for (n, b) in self.buses.iter().enumerate() {
            if seen.insert(b.id, n).is_some() {
                return Err(Error::invariant(format!("bus[{n}].id"), format!("duplicate bus id {}", b.id)));
            }
            if b.load.len() != t {
                return Err(Error::invariant(format!("bus[{n}].load"), "load profile length differs from T"));
            }
        }
        let known = |id: usize| seen.contains_key(&id);
        if !known(self.slack) {
            return Err(Error::invariant("slack", format!("slack bus {} does not exist", self.slack)));
        }
        for (l, line) in self.lines.iter().enumerate() {
            let path = format!("branch[{l}]");
            if !known(line.from) || !known(line.to) {
                return Err(Error::invariant(path, "references an unknown bus"));
            }
            if line.from == line.to {
                return Err(Error::invariant(path, "line connects a bus to itself"));
            }
            if !(line.reactance > 0.0) || !(line.tap > 0.0) {
                return Err(Error::invariant(format!("{path}.x"), "reactance and tap must be positive"));
            }
            if !(line.capacity >= 0.0) {
                return Err(Error::invariant(format!("{path}.capacity"), "capacity must be nonnegative"));
            }
        }
        for (i, g) in self.generators.iter().enumerate() {
            let path = format!("gen[{i}]");
            if !known(g.bus) {
                return Err(Error::invariant(format!("{path}.bus"), format!("bus {} does not exist", g.bus)));
            }
            if g.p_min > g.p_max {
                return Err(Error::invariant(
                    format!("{path}.p_min"),
                    format!("p_min {} exceeds p_max {}", g.p_min, g.p_max),
                ));
            }
            if g.p_max < 0.0 {
                return Err(Error::invariant(format!("{path}.p_max"), "capacity must be nonnegative"));
            }
            if !(g.ramp_up >= 0.0) || !(g.ramp_down >= 0.0) {
                return Err(Error::invariant(format!("{path}.ramp"), "ramp rates must be nonnegative"));
            }
            g.cost.validate(&format!("{path}.cost"))?;
        }
        for (k, w) in self.renewables.iter().enumerate() {
            let path = format!("renewables[{k}]");
            if !known(w.bus) {
                return Err(Error::invariant(format!("{path}.bus"), format!("bus {} does not exist", w.bus)));
            }
            if !(0.0 <= w.w_min && w.w_min <= w.w_max) {
                return Err(Error::invariant(path, "requires 0 <= w_min <= w_max"));
            }
            if w.forecast.len() != t {
                return Err(Error::invariant(format!("{path}.forecast"), "forecast length differs from T"));
            }
            if let Some(p) = w.forecast.iter().position(|&f| !(w.w_min <= f && f <= w.w_max)) {
                return Err(Error::invariant(
                    format!("{path}.forecast[{p}]"),
                    "forecast outside [w_min, w_max]",
                ));
            }
        }
        Ok(())
    }

    /// Multiplies every load by `factor`.
    pub fn scale_loads(&self, factor: f64) -> Result<Self> {
        let mut c = self.clone();
        for b in &mut c.buses {
            b.load.iter_mut().for_each(|d| *d *= factor);
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets `r_up = r_dn = fraction × p_max` (MW/min) for every unit.
    pub fn with_ramp_fraction(&self, fraction: f64) -> Result<Self> {
        let mut c = self.clone();
        for g in &mut c.generators {
            g.ramp_up = fraction * g.p_max;
            g.ramp_down = fraction * g.p_max;
        }
        c.validate()?;
        Ok(c)
    }

    /// Replaces forecasts with a `T × K` series.
    pub fn with_forecast(&self, series: &SeriesBlock) -> Result<Self> {
        check_shape(series, self.periods(), self.renewables.len(), "renewables")?;
        let mut c = self.clone();
        for (k, w) in c.renewables.iter_mut().enumerate() {
            w.forecast = series.iter().map(|row| row[k]).collect();
        }
        c.validate()?;
        Ok(c)
    }

    /// Replaces loads with a `T × N` series (columns in bus order).
    pub fn with_loads(&self, series: &SeriesBlock) -> Result<Self> {
        check_shape(series, self.periods(), self.buses.len(), "buses")?;
        let mut c = self.clone();
        for (n, b) in c.buses.iter_mut().enumerate() {
            b.load = series.iter().map(|row| row[n]).collect();
        }
        c.validate()?;
        Ok(c)
    }

    /// Multiplies every quantity measured in MW by `alpha`.
    pub fn scale_power(&self, alpha: f64) -> Result<Self> {
        let mut c = self.clone();
        for b in &mut c.buses {
            b.load.iter_mut().for_each(|d| *d *= alpha);
        }
        for l in &mut c.lines {
            l.capacity *= alpha;
        }
        for g in &mut c.generators {
            g.p_min *= alpha;
            g.p_max *= alpha;
            g.ramp_up *= alpha;
            g.ramp_down *= alpha;
            g.initial = g.initial.map(|p| p * alpha);
            // Keep unit prices fixed: C(αp) has the same marginal cost per MW.
            g.cost = match &g.cost {
                CostCurve::Linear { c0, c1 } => CostCurve::Linear { c0: *c0, c1: *c1 },
                CostCurve::Quadratic { c0, c1, c2 } => CostCurve::Quadratic { c0: *c0, c1: *c1, c2: c2 / alpha },
                CostCurve::PiecewiseLinear { points } => CostCurve::PiecewiseLinear {
                    points: points.iter().map(|&(x, y)| (x * alpha, y * alpha)).collect(),
                },
            };
        }
        for w in &mut c.renewables {
            w.w_min *= alpha;
            w.w_max *= alpha;
            w.forecast.iter_mut().for_each(|f| *f *= alpha);
        }
        c.validate()?;
        Ok(c)
    }
}

fn check_shape(series: &SeriesBlock, periods: usize, cols: usize, what: &str) -> Result<()> {
    if series.len() != periods {
        return Err(Error::Series(format!("series has {} periods, case has T = {periods}", series.len())));
    }
    if series.iter().any(|r| r.len() != cols) {
        return Err(Error::Series(format!("series must have one column per entry of {what} ({cols})")));
    }
    Ok(())
}

/// DC shift factors with the slack bus as the reference.
pub fn compute_shift_factors(case: &GridCase) -> Result<ShiftFactors> {
    let n = case.buses.len();
    let pos: HashMap<usize, usize> = case.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let slack = pos[&case.slack];

    let mut adjacency = vec![Vec::new(); n];
    for line in &case.lines {
        let (a, b) = (pos[&line.from], pos[&line.to]);
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut reached = vec![false; n];
    let mut queue = VecDeque::from([slack]);
    reached[slack] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !reached[v] {
                reached[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(island) = reached.iter().position(|r| !r) {
        return Err(Error::Network(format!(
            "network is disconnected: bus {} is not reachable from the slack bus",
            case.buses[island].id
        )));
    }

    // Reduced susceptance matrix with the slack row and column removed.
    let reduced: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let mut index = vec![usize::MAX; n];
    for (r, &i) in reduced.iter().enumerate() {
        index[i] = r;
    }
    let m = reduced.len();
    let mut bmat = DMatrix::<f64>::zeros(m, m);
    for line in &case.lines {
        let b = line.susceptance();
        let (a, c) = (pos[&line.from], pos[&line.to]);
        for (u, v) in [(a, c), (c, a)] {
            if u != slack {
                bmat[(index[u], index[u])] += b;
                if v != slack {
                    bmat[(index[u], index[v])] -= b;
                }
            }
        }
    }
    let inverse = if m == 0 {
        DMatrix::zeros(0, 0)
    } else {
        let lu = bmat.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Network("singular susceptance system".into()))?;
        let residual = (&bmat * &inv - DMatrix::<f64>::identity(m, m)).abs().max();
        if !residual.is_finite() || residual > 1e-8 {
            return Err(Error::Network("singular susceptance system".into()));
        }
        inv
    };
    // θ at bus position `u` for a unit injection at position `inj`.
    let theta = |u: usize, inj: usize| -> f64 {
        if u == slack || inj == slack {
            0.0
        } else {
            inverse[(index[u], index[inj])]
        }
    };
    let factors = (0..n)
        .map(|inj| {
            case.lines
                .iter()
                .map(|line| {
                    let (a, c) = (pos[&line.from], pos[&line.to]);
                    line.susceptance() * (theta(a, inj) - theta(c, inj))
                })
                .collect()
        })
        .collect();
    Ok(ShiftFactors { factors })
}

// ---------------------------------------------------------------------------
// Case-file parsing
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct Table {
    line: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    let t = tok.trim();
    match t {
        "Inf" | "inf" => Ok(f64::INFINITY),
        "-Inf" | "-inf" => Ok(f64::NEG_INFINITY),
        _ => t.parse().map_err(|_| Error::Parse { line, message: format!("expected a number, found `{t}`") }),
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn tokenize_tables(text: &str) -> Result<(Option<String>, BTreeMap<String, Table>, BTreeMap<String, (usize, String)>)> {
    let mut name = None;
    let mut tables = BTreeMap::new();
    let mut scalars = BTreeMap::new();
    let mut open: Option<(String, Table)> = None;
    let mut pending: Vec<f64> = Vec::new();
    let mut pending_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let mut line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if open.is_none() {
            if let Some(rest) = line.strip_prefix("function") {
                if let Some(eq) = rest.find('=') {
                    name = Some(rest[eq + 1..].trim().trim_end_matches(';').to_string());
                }
                continue;
            }
            let Some(rest) = line.strip_prefix("mpc.") else {
                return Err(Error::Parse { line: lineno, message: format!("unexpected content `{line}`") });
            };
            let eq = rest
                .find('=')
                .ok_or_else(|| Error::Parse { line: lineno, message: "expected `mpc.<field> = ...`".into() })?;
            let field = rest[..eq].trim().to_string();
            let value = rest[eq + 1..].trim();
            if let Some(body) = value.strip_prefix('[') {
                if tables.contains_key(&field) {
                    return Err(Error::Parse { line: lineno, message: format!("table `{field}` defined twice") });
                }
                open = Some((field, Table { line: lineno, rows: Vec::new() }));
                line = body;
            } else {
                let v = value.trim_end_matches(';').trim().trim_matches('\'').to_string();
                scalars.insert(field, (lineno, v));
                continue;
            }
        }
        // Inside a table body: rows end with `;` or a newline, the table with `]`.
        let (body, closes) = match line.find(']') {
            Some(i) => (&line[..i], true),
            None => (line, false),
        };
        let (tname, table) = open.as_mut().expect("table is open");
        for (seg_idx, segment) in body.split(';').enumerate() {
            if seg_idx > 0 && !pending.is_empty() {
                table.rows.push((pending_line, std::mem::take(&mut pending)));
            }
            for tok in segment.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()) {
                if pending.is_empty() {
                    pending_line = lineno;
                }
                pending.push(parse_number(tok, lineno).map_err(|e| match e {
                    Error::Parse { line, message } => Error::Parse { line, message: format!("{message} in table `{tname}`") },
                    other => other,
                })?);
            }
        }
        if !pending.is_empty() {
            table.rows.push((pending_line, std::mem::take(&mut pending)));
        }
        if closes {
            let (tname, table) = open.take().expect("table is open");
            tables.insert(tname, table);
        }
    }
    if let Some((tname, table)) = open {
        return Err(Error::Parse { line: table.line, message: format!("table `{tname}` is never closed") });
    }
    Ok((name, tables, scalars))
}

fn require_cols(table: &Table, name: &str, min: usize) -> Result<()> {
    for (line, row) in &table.rows {
        if row.len() < min {
            return Err(Error::Parse {
                line: *line,
                message: format!("table `{name}` needs at least {min} columns, found {}", row.len()),
            });
        }
    }
    Ok(())
}

fn as_id(v: f64, line: usize) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Parse { line, message: format!("expected a nonnegative integer id, found {v}") })
    }
}

/// Parses a MATPOWER-style case file.
///
/// Recognized fields: `mpc.baseMVA`, `mpc.bus`, `mpc.branch`, `mpc.gen`,
/// `mpc.gencost`, plus `mpc.renewables` (bus, w_min, w_max), `mpc.time`
/// (T, dispatch interval min, response window min), `mpc.forecast` (T × K),
/// and optional `mpc.load_profile` (T multipliers of `Pd`), `mpc.load`
/// (T × N MW, overrides `Pd`), `mpc.ramp` (per unit: up, down MW/min),
/// `mpc.agc` (per unit 0/1), `mpc.initial_dispatch` (per unit MW) and
/// `mpc.slack` (bus id). A bus of type 3 designates the slack bus when
/// `mpc.slack` is absent; otherwise the first generator bus is used.
pub fn parse_case(text: &str) -> Result<GridCase> {
    let (name, tables, scalars) = tokenize_tables(text)?;
    let table = |key: &str| -> Result<&Table> {
        tables.get(key).ok_or_else(|| Error::Parse { line: 0, message: format!("missing table `mpc.{key}`") })
    };

    let base_mva = match scalars.get("baseMVA") {
        Some((line, v)) => parse_number(v, *line)?,
        None => 100.0,
    };

    let time_t = table("time")?;
    require_cols(time_t, "time", 3)?;
    let (tline, trow) = time_t
        .rows
        .first()
        .ok_or_else(|| Error::Parse { line: time_t.line, message: "table `time` is empty".into() })?;
    let periods = as_id(trow[0], *tline)?;
    let time = TimeGrid { periods, dispatch_minutes: trow[1], response_minutes: trow[2] };

    let bus_t = table("bus")?;
    require_cols(bus_t, "bus", 3)?;
    let profile: Vec<f64> = match tables.get("load_profile") {
        Some(p) => {
            require_cols(p, "load_profile", 1)?;
            if p.rows.len() != periods {
                return Err(Error::Parse {
                    line: p.line,
                    message: format!("load_profile has {} rows, expected T = {periods}", p.rows.len()),
                });
            }
            p.rows.iter().map(|(_, r)| r[0]).collect()
        }
        None => vec![1.0; periods],
    };
    let mut slack = None;
    let mut buses = Vec::with_capacity(bus_t.rows.len());
    for (line, row) in &bus_t.rows {
        let id = as_id(row[0], *line)?;
        if row[1] == 3.0 {
            slack = Some(id);
        }
        buses.push(Bus { id, load: profile.iter().map(|m| m * row[2]).collect() });
    }
    if let Some(load_t) = tables.get("load") {
        if load_t.rows.len() != periods {
            return Err(Error::Parse {
                line: load_t.line,
                message: format!("load has {} rows, expected T = {periods}", load_t.rows.len()),
            });
        }
        require_cols(load_t, "load", buses.len())?;
        for (t, (_, row)) in load_t.rows.iter().enumerate() {
            for (n, b) in buses.iter_mut().enumerate() {
                b.load[t] = row[n];
            }
        }
    }
    if let Some((line, v)) = scalars.get("slack") {
        slack = Some(as_id(parse_number(v, *line)?, *line)?);
    }

    let branch_t = table("branch")?;
    require_cols(branch_t, "branch", 6)?;
    let mut lines = Vec::new();
    for (line, row) in &branch_t.rows {
        if row.len() > 10 && row[10] == 0.0 {
            continue;
        }
        let tap = if row.len() > 8 && row[8] != 0.0 { row[8] } else { 1.0 };
        lines.push(Line {
            from: as_id(row[0], *line)?,
            to: as_id(row[1], *line)?,
            reactance: row[3],
            tap,
            capacity: if row[5] == 0.0 { f64::INFINITY } else { row[5] },
        });
    }

    let gen_t = table("gen")?;
    require_cols(gen_t, "gen", 10)?;
    let cost_t = table("gencost")?;
    if cost_t.rows.len() != gen_t.rows.len() {
        return Err(Error::Parse {
            line: cost_t.line,
            message: format!("gencost has {} rows for {} generators", cost_t.rows.len(), gen_t.rows.len()),
        });
    }
    let per_gen = |key: &str, cols: usize| -> Result<Option<Vec<Vec<f64>>>> {
        match tables.get(key) {
            None => Ok(None),
            Some(t) => {
                require_cols(t, key, cols)?;
                if t.rows.len() != gen_t.rows.len() {
                    return Err(Error::Parse {
                        line: t.line,
                        message: format!("`{key}` needs one row per generator ({})", gen_t.rows.len()),
                    });
                }
                Ok(Some(t.rows.iter().map(|(_, r)| r.clone()).collect()))
            }
        }
    };
    let ramps = per_gen("ramp", 2)?;
    let agc = per_gen("agc", 1)?;
    let initial = per_gen("initial_dispatch", 1)?;
    let mut generators = Vec::new();
    for (i, ((line, row), (cline, crow))) in gen_t.rows.iter().zip(&cost_t.rows).enumerate() {
        if row[7] <= 0.0 {
            continue;
        }
        let (ramp_up, ramp_down) = match &ramps {
            Some(r) => (r[i][0], r[i][1]),
            None if row.len() > 16 && row[16] > 0.0 => (row[16], row[16]),
            None => (f64::INFINITY, f64::INFINITY),
        };
        generators.push(Generator {
            bus: as_id(row[0], *line)?,
            p_max: row[8],
            p_min: row[9],
            ramp_up,
            ramp_down,
            cost: parse_cost(crow, *cline)?,
            agc: agc.as_ref().map_or(true, |a| a[i][0] != 0.0),
            initial: initial.as_ref().map(|v| v[i][0]),
        });
    }

    let mut renewables = Vec::new();
    if let Some(ren_t) = tables.get("renewables") {
        require_cols(ren_t, "renewables", 3)?;
        let fc = table("forecast")?;
        if fc.rows.len() != periods {
            return Err(Error::Parse {
                line: fc.line,
                message: format!("forecast has {} rows, expected T = {periods}", fc.rows.len()),
            });
        }
        require_cols(fc, "forecast", ren_t.rows.len())?;
        for (k, (line, row)) in ren_t.rows.iter().enumerate() {
            renewables.push(Renewable {
                bus: as_id(row[0], *line)?,
                w_min: row[1],
                w_max: row[2],
                forecast: fc.rows.iter().map(|(_, r)| r[k]).collect(),
            });
        }
    }

    GridCase::new(
        name.unwrap_or_else(|| "case".into()),
        base_mva,
        buses,
        lines,
        generators,
        renewables,
        time,
        slack,
    )
}

fn parse_cost(row: &[f64], line: usize) -> Result<CostCurve> {
    let err = |m: &str| Error::Parse { line, message: m.to_string() };
    if row.len() < 4 {
        return Err(err("gencost rows need model, startup, shutdown, n"));
    }
    let n = as_id(row[3], line)?;
    let coeffs = &row[4..];
    match row[0] as i64 {
        2 => {
            if coeffs.len() < n {
                return Err(err("gencost row has fewer coefficients than declared"));
            }
            let c = &coeffs[..n];
            Ok(match n {
                1 => CostCurve::Linear { c0: c[0], c1: 0.0 },
                2 => CostCurve::Linear { c0: c[1], c1: c[0] },
                3 => CostCurve::Quadratic { c0: c[2], c1: c[1], c2: c[0] },
                _ => return Err(err("only polynomial costs up to degree 2 are supported")),
            })
        }
        1 => {
            if coeffs.len() < 2 * n {
                return Err(err("piecewise-linear gencost row is short"));
            }
            let points = (0..n).map(|j| (coeffs[2 * j], coeffs[2 * j + 1])).collect();
            Ok(CostCurve::PiecewiseLinear { points })
        }
        m => Err(err(&format!("unknown gencost model {m}"))),
    }
}

/// Writes a case in the format accepted by [`parse_case`].
pub fn serialize_case(case: &GridCase) -> String {
    let mut s = String::new();
    let num = |v: f64| -> String {
        if v == f64::INFINITY {
            "Inf".into()
        } else {
            format!("{v}")
        }
    };
    let _ = writeln!(s, "function mpc = {}", case.name);
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {};", num(case.base_mva));
    let _ = writeln!(s, "mpc.slack = {};", case.slack);
    let _ = writeln!(
        s,
        "mpc.time = [\n\t{}\t{}\t{};\n];",
        case.time.periods,
        num(case.time.dispatch_minutes),
        num(case.time.response_minutes)
    );
    let _ = writeln!(s, "%\tbus_i\ttype\tPd");
    let _ = writeln!(s, "mpc.bus = [");
    for b in &case.buses {
        let kind = if b.id == case.slack { 3 } else { 1 };
        let _ = writeln!(s, "\t{}\t{kind}\t{};", b.id, num(b.load[0]));
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.load = [");
    for t in 0..case.periods() {
        let row: Vec<String> = case.buses.iter().map(|b| num(b.load[t])).collect();
        let _ = writeln!(s, "\t{};", row.join("\t"));
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus");
    let _ = writeln!(s, "mpc.branch = [");
    for l in &case.lines {
        let cap = if l.capacity.is_finite() { num(l.capacity) } else { "0".into() };
        let _ = writeln!(s, "\t{}\t{}\t0\t{}\t0\t{cap}\t0\t0\t{}\t0\t1;", l.from, l.to, num(l.reactance), num(l.tap));
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin");
    let _ = writeln!(s, "mpc.gen = [");
    for g in &case.generators {
        let _ = writeln!(s, "\t{}\t0\t0\t0\t0\t1\t{}\t1\t{}\t{};", g.bus, num(case.base_mva), num(g.p_max), num(g.p_min));
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.gencost = [");
    for g in &case.generators {
        let body = match &g.cost {
            CostCurve::Linear { c0, c1 } => format!("2\t0\t0\t2\t{}\t{}", num(*c1), num(*c0)),
            CostCurve::Quadratic { c0, c1, c2 } => format!("2\t0\t0\t3\t{}\t{}\t{}", num(*c2), num(*c1), num(*c0)),
            CostCurve::PiecewiseLinear { points } => {
                let pts: Vec<String> = points.iter().map(|(x, y)| format!("{}\t{}", num(*x), num(*y))).collect();
                format!("1\t0\t0\t{}\t{}", points.len(), pts.join("\t"))
            }
        };
        let _ = writeln!(s, "\t{body};");
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.ramp = [");
    for g in &case.generators {
        let _ = writeln!(s, "\t{}\t{};", num(g.ramp_up), num(g.ramp_down));
    }
    let _ = writeln!(s, "];");
    let _ = writeln!(s, "mpc.agc = [");
    for g in &case.generators {
        let _ = writeln!(s, "\t{};", u8::from(g.agc));
    }
    let _ = writeln!(s, "];");
    if case.generators.iter().all(|g| g.initial.is_some()) && !case.generators.is_empty() {
        let _ = writeln!(s, "mpc.initial_dispatch = [");
        for g in &case.generators {
            let _ = writeln!(s, "\t{};", num(g.initial.unwrap_or(0.0)));
        }
        let _ = writeln!(s, "];");
    }
    if !case.renewables.is_empty() {
        let _ = writeln!(s, "mpc.renewables = [");
        for w in &case.renewables {
            let _ = writeln!(s, "\t{}\t{}\t{};", w.bus, num(w.w_min), num(w.w_max));
        }
        let _ = writeln!(s, "];");
        let _ = writeln!(s, "mpc.forecast = [");
        for t in 0..case.periods() {
            let row: Vec<String> = case.renewables.iter().map(|w| num(w.forecast[t])).collect();
            let _ = writeln!(s, "\t{};", row.join("\t"));
        }
        let _ = writeln!(s, "];");
    }
    s
}

// ---------------------------------------------------------------------------
// Delimited series
// ---------------------------------------------------------------------------

/// Rows are periods, columns are entities.
pub type SeriesBlock = Vec<Vec<f64>>;

/// A comma-delimited series table. Tables with a leading `scenario` column
/// hold several consecutive blocks of `T` rows each; an optional `period`
/// column is accepted and checked for 1-based ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub columns: Vec<String>,
    pub blocks: Vec<SeriesBlock>,
}

impl SeriesTable {
    pub fn single(&self) -> Result<&SeriesBlock> {
        match self.blocks.as_slice() {
            [b] => Ok(b),
            _ => Err(Error::Series(format!("expected a single block, found {}", self.blocks.len()))),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let multi = self.blocks.len() > 1;
        let mut header = Vec::new();
        if multi {
            header.push("scenario".to_string());
        }
        header.push("period".to_string());
        header.extend(self.columns.iter().cloned());
        let _ = writeln!(s, "{}", header.join(","));
        for (b, block) in self.blocks.iter().enumerate() {
            for (t, row) in block.iter().enumerate() {
                let mut cells = Vec::new();
                if multi {
                    cells.push(b.to_string());
                }
                cells.push((t + 1).to_string());
                cells.extend(row.iter().map(|v| format!("{v}")));
                let _ = writeln!(s, "{}", cells.join(","));
            }
        }
        s
    }
}

/// Reads a series table. `periods`, when given, is the required row count per block.
pub fn load_series(text: &str, periods: Option<usize>) -> Result<SeriesTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Series(format!("unreadable header: {e}")))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Series("missing header row".into()));
    }
    let names: Vec<String> = headers.iter().map(str::to_string).collect();
    let has_scenario = names.first().is_some_and(|h| h.eq_ignore_ascii_case("scenario"));
    let period_col = names.iter().position(|h| h.eq_ignore_ascii_case("period"));
    let skip = usize::from(has_scenario) + usize::from(period_col.is_some());
    let columns: Vec<String> = names[skip..].to_vec();
    if columns.is_empty() {
        return Err(Error::Series("table has no entity columns".into()));
    }

    let mut blocks: Vec<SeriesBlock> = Vec::new();
    let mut current_id: Option<String> = None;
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 2;
        let record = record.map_err(|e| Error::Series(format!("row {row_no}: {e}")))?;
        if record.len() != names.len() {
            return Err(Error::Series(format!(
                "row {row_no}: ragged row with {} cells, header has {}",
                record.len(),
                names.len()
            )));
        }
        let id = if has_scenario { Some(record[0].to_string()) } else { None };
        if blocks.is_empty() || id != current_id {
            blocks.push(Vec::new());
            current_id = id;
        }
        let block = blocks.last_mut().expect("pushed above");
        if let Some(pc) = period_col {
            let expected = block.len() + 1;
            if record[pc].parse::<usize>().ok() != Some(expected) {
                return Err(Error::Series(format!("row {row_no}: expected period {expected}, found `{}`", &record[pc])));
            }
        }
        let values = record
            .iter()
            .skip(skip)
            .map(|cell| {
                cell.parse::<f64>()
                    .map_err(|_| Error::Series(format!("row {row_no}: non-numeric cell `{cell}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        block.push(values);
    }
    if blocks.is_empty() {
        return Err(Error::Series("table has no data rows".into()));
    }
    if let Some(t) = periods {
        if let Some(b) = blocks.iter().position(|b| b.len() != t) {
            return Err(Error::Series(format!(
                "period count mismatch: block {b} has {} rows, case has T = {t}",
                blocks[b].len()
            )));
        }
    }
    Ok(SeriesTable { columns, blocks })
}
