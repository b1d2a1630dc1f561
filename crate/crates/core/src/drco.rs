//! Co-optimization of multi-period dispatch and DNE limits as a conic program.
//!
//! The affine re-dispatch rule `p_it(ε) = p̂_it + Σ_k (B_ikt ε_kt + b_ikt)` is
//! modelled through the box substitution `ε = ε^L + E v`, `v ∈ [0,1]`,
//! `E = diag(ε^U − ε^L)`, with policy variables `S = B E` and `s₀ = B ε^L + b`.
//! Every inequality row then reads `a₀ + Σ_j c_j v_j ≤ 0` with `a₀`, `c_j`
//! affine in the decisions; its worst case over the box is enforced with
//! `R_j ≥ c_j`, `R_j ≥ 0`, `a₀ + Σ_j R_j ≤ 0`.

use std::fmt::Write as _;

use crate::conic::{self, ConicProgram, LinExpr, ProgramBuilder, ResidualReport, Solution, SolveStatus, SolverSettings, Var};
use crate::error::{Error, Result};
use crate::grid::{CostCurve, GridCase};
use crate::uncertainty::{gauss_half_width, AmbiguitySet};

/// Columns of `E` narrower than this are treated as zero width on recovery.
pub const ZERO_WIDTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CostEncoding {
    /// Quadratic costs through a rotated-cone epigraph.
    #[default]
    SocEpigraph,
    /// Quadratic costs under-approximated by this many tangent cuts over `[p_min, p_max]`.
    TangentCuts(usize),
}

/// Weights of the expected over/under-estimation cost terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionConfig {
    /// $ per unit of P⁺.
    pub delta_plus: f64,
    /// $ per unit of P⁻.
    pub delta_minus: f64,
    /// CPLA segment count `H`.
    pub segments: usize,
    /// Per-(k,t) cost coefficients `c⁺`; defaults to 1.
    pub c_plus: Option<Vec<Vec<f64>>>,
    /// Per-(k,t) cost coefficients `c⁻`; defaults to 1.
    pub c_minus: Option<Vec<Vec<f64>>>,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        Self { delta_plus: 0.0, delta_minus: 0.0, segments: 16, c_plus: None, c_minus: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    /// Weight on utilization, $.
    pub delta: f64,
    /// Utilization floor.
    pub u0: f64,
    /// Overrides the case's AGC flags when set.
    pub agc: Option<Vec<bool>>,
    pub cost_encoding: CostEncoding,
    pub extension: Option<ExtensionConfig>,
    pub settings: SolverSettings,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            delta: 10_000.0,
            u0: 0.7,
            agc: None,
            cost_encoding: CostEncoding::default(),
            extension: None,
            settings: SolverSettings::default(),
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        check_u0(self.u0)?;
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be finite and nonnegative, got {}", self.delta)));
        }
        if let CostEncoding::TangentCuts(n) = self.cost_encoding {
            if n < 2 {
                return Err(Error::Config("tangent-cut encoding needs at least 2 cuts".into()));
            }
        }
        if let Some(ext) = &self.extension {
            if !(ext.delta_plus >= 0.0) || !(ext.delta_minus >= 0.0) {
                return Err(Error::Config("delta_plus and delta_minus must be nonnegative".into()));
            }
            if ext.segments == 0 {
                return Err(Error::Config("CPLA segment count H must be at least 1".into()));
            }
            for c in [&ext.c_plus, &ext.c_minus].into_iter().flatten() {
                if c.iter().flatten().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Config("expected-cost coefficients must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }

    fn agc_mask(&self, case: &GridCase) -> Result<Vec<bool>> {
        match &self.agc {
            Some(mask) if mask.len() != case.generators.len() => Err(Error::Config(format!(
                "AGC mask has {} entries for {} generators",
                mask.len(),
                case.generators.len()
            ))),
            Some(mask) => Ok(mask.clone()),
            None => Ok(case.generators.iter().map(|g| g.agc).collect()),
        }
    }
}

pub fn check_u0(u0: f64) -> Result<()> {
    if !(u0 > 2.0 / 3.0 && u0 <= 1.0) {
        return Err(Error::Config(format!(
            "u0 = {u0} must lie in (2/3, 1]: the conic chance reformulation requires u > 2/3"
        )));
    }
    Ok(())
}

/// Variable handles of the assembled program.
#[derive(Debug, Clone, Default)]
pub struct VarMap {
    /// `[i][t]`
    pub p_hat: Vec<Vec<Var>>,
    /// `[k][t]`
    pub eps_l: Vec<Vec<Var>>,
    /// `[k][t]`
    pub eps_u: Vec<Vec<Var>>,
    /// `[i][k][t]`, `None` for units outside AGC.
    pub s: Vec<Vec<Vec<Option<Var>>>>,
    /// `[i][k][t]`
    pub s0: Vec<Vec<Vec<Option<Var>>>>,
    pub u: Option<Var>,
    /// `[k][t]`, empty without the chance block.
    pub r: Vec<Vec<Var>>,
    pub s_budget: Vec<Vec<Var>>,
    pub z: Vec<Vec<Var>>,
}

/// A program under construction together with its variable map.
pub struct DrcoModel<'a> {
    pub case: &'a GridCase,
    pub ambiguity: &'a AmbiguitySet,
    pub agc: Vec<bool>,
    pub builder: ProgramBuilder,
    pub map: VarMap,
    /// Affine expression of the dispatch cost.
    pub cost: LinExpr,
}

impl<'a> DrcoModel<'a> {
    /// Declares `p̂`, the DNE limits with their bounds, and the policy variables.
    pub fn new(case: &'a GridCase, ambiguity: &'a AmbiguitySet, agc: Vec<bool>) -> Result<Self> {
        ambiguity.check_shape(case)?;
        if agc.len() != case.generators.len() {
            return Err(Error::Config("AGC mask length differs from generator count".into()));
        }
        let (ni, nk, nt) = (case.generators.len(), case.renewables.len(), case.periods());
        let mut b = ProgramBuilder::new();
        let p_hat = case
            .generators
            .iter()
            .map(|g| (0..nt).map(|_| b.add_var(g.p_min, g.p_max)).collect())
            .collect();
        let mut eps_l = Vec::with_capacity(nk);
        let mut eps_u = Vec::with_capacity(nk);
        for w in &case.renewables {
            eps_l.push((0..nt).map(|t| b.add_var(w.w_min - w.forecast[t], 0.0)).collect());
            eps_u.push((0..nt).map(|t| b.add_var(0.0, w.w_max - w.forecast[t])).collect());
        }
        let policy = |b: &mut ProgramBuilder| -> Vec<Vec<Vec<Option<Var>>>> {
            (0..ni)
                .map(|i| (0..nk).map(|_| (0..nt).map(|_| agc[i].then(|| b.free_var())).collect()).collect())
                .collect()
        };
        let s = policy(&mut b);
        let s0 = policy(&mut b);
        Ok(Self {
            case,
            ambiguity,
            agc,
            builder: b,
            map: VarMap { p_hat, eps_l, eps_u, s, s0, ..VarMap::default() },
            cost: LinExpr::new(),
        })
    }

    fn width(&self, k: usize, t: usize) -> LinExpr {
        LinExpr::var(self.map.eps_u[k][t]).term(self.map.eps_l[k][t], -1.0)
    }

    /// `p_it(v) − p̂_it` split into its constant part and per-`k` coefficients on `v_kt`.
    fn policy_delta(&self, i: usize, t: usize) -> (LinExpr, Vec<LinExpr>) {
        let nk = self.case.renewables.len();
        let mut a0 = LinExpr::new();
        let mut c = vec![LinExpr::new(); nk];
        for k in 0..nk {
            if let (Some(s), Some(s0)) = (self.map.s[i][k][t], self.map.s0[i][k][t]) {
                a0.push(s0, 1.0);
                c[k].push(s, 1.0);
            }
        }
        (a0, c)
    }

    /// Adds `a₀ + Σ_j c_j v_j ≤ 0` for all `v ∈ [0,1]`.
    pub fn add_box_row(&mut self, a0: LinExpr, coeffs: Vec<LinExpr>) {
        add_box_row(&mut self.builder, a0, coeffs);
    }

    /// Nominal dispatch constraints: balance, line limits, ramps (capacity is a variable bound).
    pub fn build_nominal_ed(&mut self) {
        let case = self.case;
        let nt = case.periods();
        for t in 0..nt {
            let mut balance = LinExpr::constant(case.total_forecast(t) - case.total_load(t));
            for i in 0..case.generators.len() {
                balance.push(self.map.p_hat[i][t], 1.0);
            }
            self.builder.add_eq(balance);
            for l in case.limited_lines() {
                let mut flow = LinExpr::constant(case.load_flow(l, t));
                for (k, w) in case.renewables.iter().enumerate() {
                    flow.constant += case.renewable_factor(k, l) * w.forecast[t];
                }
                for i in 0..case.generators.len() {
                    let f = case.gen_factor(i, l);
                    if f != 0.0 {
                        flow.push(self.map.p_hat[i][t], f);
                    }
                }
                let cap = case.lines[l].capacity;
                let mut up = flow.clone();
                up.constant -= cap;
                self.builder.add_le(up);
                let mut dn = LinExpr::new();
                dn.add_expr(&flow, -1.0);
                dn.constant -= cap;
                self.builder.add_le(dn);
            }
        }
        let dd = case.time.dispatch_minutes;
        for (i, g) in case.generators.iter().enumerate() {
            for t in 0..nt {
                let prev = if t == 0 {
                    match g.initial {
                        Some(p0) => LinExpr::constant(p0),
                        None => continue,
                    }
                } else {
                    LinExpr::var(self.map.p_hat[i][t - 1])
                };
                let mut step = LinExpr::var(self.map.p_hat[i][t]);
                step.add_expr(&prev, -1.0);
                if g.ramp_up.is_finite() {
                    self.builder.add_le(step.clone().plus(-g.ramp_up * dd));
                }
                if g.ramp_down.is_finite() {
                    let mut dn = LinExpr::new();
                    dn.add_expr(&step, -1.0);
                    self.builder.add_le(dn.plus(-g.ramp_down * dd));
                }
            }
        }
    }

    /// Robust re-dispatch rows under the affine policy, and the balance identity.
    pub fn build_robust_box(&mut self) {
        let case = self.case;
        let (ni, nk, nt) = (case.generators.len(), case.renewables.len(), case.periods());
        let dr = case.time.response_minutes;
        let dd = case.time.dispatch_minutes;

        // Balance by coefficient matching: Σ_i S_ikt = −E_kt, Σ_{i,k} s0_ikt = −Σ_k ε^L_kt.
        for t in 0..nt {
            let mut offset = LinExpr::new();
            for k in 0..nk {
                let mut slope = self.width(k, t);
                for i in 0..ni {
                    if let Some(s) = self.map.s[i][k][t] {
                        slope.push(s, 1.0);
                    }
                    if let Some(s0) = self.map.s0[i][k][t] {
                        offset.push(s0, 1.0);
                    }
                }
                self.builder.add_eq(slope);
                offset.push(self.map.eps_l[k][t], 1.0);
            }
            if nk > 0 {
                self.builder.add_eq(offset);
            }
        }

        for (i, g) in case.generators.iter().enumerate() {
            if !self.agc[i] {
                continue;
            }
            for t in 0..nt {
                let (delta0, coef) = self.policy_delta(i, t);
                let p_hat = LinExpr::var(self.map.p_hat[i][t]);
                // Capacity.
                let mut a0 = p_hat.clone();
                a0.add_expr(&delta0, 1.0);
                self.add_box_row(a0.clone().plus(-g.p_max), coef.clone());
                self.add_box_row(negate(&a0).plus(g.p_min), coef.iter().map(negate).collect());
                // Response window around p̂.
                if g.ramp_up.is_finite() {
                    self.add_box_row(delta0.clone().plus(-g.ramp_up * dr), coef.clone());
                }
                if g.ramp_down.is_finite() {
                    self.add_box_row(negate(&delta0).plus(-g.ramp_down * dr), coef.iter().map(negate).collect());
                }
                // Ramp between consecutive re-dispatched outputs.
                let (prev0, prev_coef) = if t == 0 {
                    match g.initial {
                        Some(p0) => (LinExpr::constant(p0), Vec::new()),
                        None => continue,
                    }
                } else {
                    let (d, c) = self.policy_delta(i, t - 1);
                    let mut p = LinExpr::var(self.map.p_hat[i][t - 1]);
                    p.add_expr(&d, 1.0);
                    (p, c)
                };
                let mut step0 = a0.clone();
                step0.add_expr(&prev0, -1.0);
                let mut step_coef = coef.clone();
                step_coef.extend(prev_coef.iter().map(negate));
                if g.ramp_up.is_finite() {
                    self.add_box_row(step0.clone().plus(-g.ramp_up * dd), step_coef.clone());
                }
                if g.ramp_down.is_finite() {
                    self.add_box_row(negate(&step0).plus(-g.ramp_down * dd), step_coef.iter().map(negate).collect());
                }
            }
        }

        for t in 0..nt {
            for l in case.limited_lines() {
                let mut a0 = LinExpr::constant(case.load_flow(l, t));
                let mut coef: Vec<LinExpr> = Vec::with_capacity(nk);
                for (k, w) in case.renewables.iter().enumerate() {
                    let f = case.renewable_factor(k, l);
                    a0.constant += f * w.forecast[t];
                    let mut c = LinExpr::new();
                    if f != 0.0 {
                        a0.push(self.map.eps_l[k][t], f);
                        c.add_expr(&self.width(k, t), f);
                    }
                    coef.push(c);
                }
                for i in 0..ni {
                    let f = case.gen_factor(i, l);
                    if f == 0.0 {
                        continue;
                    }
                    a0.push(self.map.p_hat[i][t], f);
                    for k in 0..nk {
                        if let (Some(s), Some(s0)) = (self.map.s[i][k][t], self.map.s0[i][k][t]) {
                            a0.push(s0, f);
                            coef[k].push(s, f);
                        }
                    }
                }
                let cap = case.lines[l].capacity;
                self.add_box_row(a0.clone().plus(-cap), coef.clone());
                self.add_box_row(negate(&a0).plus(-cap), coef.iter().map(negate).collect());
            }
        }
    }

    /// Utilization variable `u ∈ [u₀, 1]` and the per-(k,t) conic chance block.
    pub fn build_chance_socp(&mut self, u0: f64) -> Result<()> {
        check_u0(u0)?;
        let u = self.builder.add_var(u0, 1.0);
        self.map.u = Some(u);
        let (nk, nt) = (self.case.renewables.len(), self.case.periods());
        let mut r = vec![Vec::with_capacity(nt); nk];
        let mut s = vec![Vec::with_capacity(nt); nk];
        let mut z = vec![Vec::with_capacity(nt); nk];
        for t in 0..nt {
            let mut budget = LinExpr::var(u).plus(-1.0);
            for k in 0..nk {
                let block = add_chance_block(
                    &mut self.builder,
                    self.ambiguity.mean[k][t],
                    self.ambiguity.std[k][t],
                    self.map.eps_l[k][t],
                    self.map.eps_u[k][t],
                );
                budget.push(block.s, 1.0);
                r[k].push(block.r);
                s[k].push(block.s);
                z[k].push(block.z);
            }
            self.builder.add_le(budget);
        }
        self.map.r = r;
        self.map.s_budget = s;
        self.map.z = z;
        Ok(())
    }

    /// Dispatch cost `Σ_t Σ_i C_i(p̂_it)` and the `−δu` reward.
    pub fn build_objective(&mut self, delta: f64, encoding: CostEncoding) -> Result<()> {
        let case = self.case;
        let mut cost = LinExpr::new();
        for (i, g) in case.generators.iter().enumerate() {
            g.cost.validate(&format!("gen[{i}].cost"))?;
            for t in 0..case.periods() {
                let p = self.map.p_hat[i][t];
                match (&g.cost, encoding) {
                    (CostCurve::Linear { c0, c1 }, _) => {
                        cost.constant += c0;
                        cost.push(p, *c1);
                    }
                    (CostCurve::Quadratic { c0, c1, c2 }, _) if *c2 == 0.0 => {
                        cost.constant += c0;
                        cost.push(p, *c1);
                    }
                    (CostCurve::Quadratic { c0, c1, c2 }, CostEncoding::SocEpigraph) => {
                        // y ≥ (p/m)² as ‖(2p/m, y−1)‖ ≤ y+1, m keeps y near unit scale.
                        let m = g.p_max.abs().max(g.p_min.abs()).max(1.0);
                        let y = self.builder.nonneg_var();
                        self.builder.add_soc_affine(vec![
                            LinExpr::var(y).plus(1.0),
                            LinExpr::new().term(p, 2.0 / m),
                            LinExpr::var(y).plus(-1.0),
                        ]);
                        cost.constant += c0;
                        cost.push(p, *c1);
                        cost.push(y, c2 * m * m);
                    }
                    (CostCurve::Quadratic { c0, c1, c2 }, CostEncoding::TangentCuts(n)) => {
                        let y = self.builder.free_var();
                        for j in 0..n {
                            let q = g.p_min + (g.p_max - g.p_min) * j as f64 / (n - 1) as f64;
                            // y ≥ c2 q² + 2 c2 q (p − q) = 2 c2 q p − c2 q²
                            self.builder.add_le(LinExpr::new().term(p, 2.0 * c2 * q).term(y, -1.0).plus(-c2 * q * q));
                        }
                        cost.constant += c0;
                        cost.push(p, *c1);
                        cost.push(y, 1.0);
                    }
                    (CostCurve::PiecewiseLinear { points }, _) => {
                        let y = self.builder.free_var();
                        for w in points.windows(2) {
                            let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                            // y ≥ y0 + slope (p − x0)
                            self.builder.add_le(
                                LinExpr::new().term(p, slope).term(y, -1.0).plus(w[0].1 - slope * w[0].0),
                            );
                        }
                        cost.push(y, 1.0);
                    }
                }
            }
        }
        for &(v, c) in &cost.terms {
            self.builder.add_objective(v, c);
        }
        self.builder.add_objective_constant(cost.constant);
        if let Some(u) = self.map.u {
            self.builder.add_objective(u, -delta);
        }
        self.cost = cost;
        Ok(())
    }
}

fn negate(e: &LinExpr) -> LinExpr {
    let mut n = LinExpr::new();
    n.add_expr(e, -1.0);
    n
}

/// Adds `a₀ + Σ_j c_j v_j ≤ 0` for all `v ∈ [0,1]^J` to `builder`.
///
/// Constant coefficients contribute `max(c_j, 0)` directly; variable ones
/// get an `R_j ≥ max(c_j, 0)` variable.
pub fn add_box_row(builder: &mut ProgramBuilder, a0: LinExpr, coeffs: Vec<LinExpr>) {
    let mut row = a0;
    for c in coeffs {
        let c = c.compact();
        if c.terms.is_empty() {
            row.constant += c.constant.max(0.0);
            continue;
        }
        let r = builder.nonneg_var();
        let mut ge = c;
        ge.push(r, -1.0);
        builder.add_le(ge);
        row.push(r, 1.0);
    }
    builder.add_le(row);
}

/// `max_{v ∈ [0,1]^J} a₀ + Σ c_j v_j`.
pub fn box_worst_case(a0: f64, coeffs: &[f64]) -> f64 {
    a0 + coeffs.iter().map(|c| c.max(0.0)).sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
pub struct ChanceBlock {
    pub r: Var,
    pub s: Var,
    pub z: Var,
}

/// Per-(k,t) conic block: `rz ≥ 2/3`, `z² ≤ s`, `σ r ≤ μ − ε^L`, `σ r ≤ ε^U − μ`.
pub fn add_chance_block(
    builder: &mut ProgramBuilder,
    mu: f64,
    sigma: f64,
    eps_l: Var,
    eps_u: Var,
) -> ChanceBlock {
    let r = builder.nonneg_var();
    let s = builder.nonneg_var();
    let z = builder.nonneg_var();
    builder.add_soc_affine(vec![
        LinExpr::var(r).term(z, 1.0),
        LinExpr::constant((8.0f64 / 3.0).sqrt()),
        LinExpr::var(r).term(z, -1.0),
    ]);
    builder.add_soc_affine(vec![
        LinExpr::var(s).plus(1.0),
        LinExpr::var(s).plus(-1.0),
        LinExpr::new().term(z, 2.0),
    ]);
    builder.add_le(LinExpr::new().term(r, sigma).term(eps_l, 1.0).plus(-mu));
    builder.add_le(LinExpr::new().term(r, sigma).term(eps_u, -1.0).plus(mu));
    ChanceBlock { r, s, z }
}

/// Smallest upper half-width `ε^U − μ` certified for a single (k,t) at utilization `u`.
pub fn minimal_half_width(mu: f64, sigma: f64, u: f64, settings: &SolverSettings) -> Result<(f64, ConicProgram, Solution)> {
    check_u0(u)?;
    let mut b = ProgramBuilder::new();
    let eps_l = b.add_var(f64::NEG_INFINITY, 0.0);
    let eps_u = b.add_var(0.0, f64::INFINITY);
    let block = add_chance_block(&mut b, mu, sigma, eps_l, eps_u);
    b.add_le(LinExpr::var(block.s).plus(-(1.0 - u)));
    b.add_objective(eps_u, 1.0);
    b.add_objective_constant(-mu);
    let program = b.build()?;
    let sol = conic::solve(&program, settings)?;
    if !sol.is_optimal() {
        return Err(Error::Solve { status: sol.status, diagnostics: sol.diagnostics });
    }
    Ok((sol.value(eps_u) - mu, program, sol))
}

/// Closed-form counterpart of [`minimal_half_width`]: `σ·2/(3√(1−u))`.
pub fn gauss_min_half_width(sigma: f64, u: f64) -> f64 {
    sigma * gauss_half_width(1.0 - u)
}

/// Objective terms of a solved model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectiveBreakdown {
    pub dispatch_cost: f64,
    /// `−δu`
    pub utilization_term: f64,
    /// `δ⁺ ×` CPLA bound on P⁺.
    pub expected_plus_term: f64,
    /// `δ⁻ ×` CPLA bound on P⁻.
    pub expected_minus_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DneSolution {
    pub delta: f64,
    pub u0: f64,
    pub agc: Vec<bool>,
    /// `[i][t]`
    pub p_hat: Vec<Vec<f64>>,
    /// `[i][k][t]`
    pub s: Vec<Vec<Vec<f64>>>,
    pub s0: Vec<Vec<Vec<f64>>>,
    pub b_coef: Vec<Vec<Vec<f64>>>,
    pub b_const: Vec<Vec<Vec<f64>>>,
    /// `[k][t]`
    pub eps_l: Vec<Vec<f64>>,
    pub eps_u: Vec<Vec<f64>>,
    pub u: f64,
    pub r: Vec<Vec<f64>>,
    pub s_budget: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub objective: ObjectiveBreakdown,
    pub status: SolveStatus,
    pub solve_time: f64,
    pub iterations: u32,
    pub verification: Option<ResidualReport>,
}

impl DneSolution {
    pub fn periods(&self) -> usize {
        self.p_hat.first().map_or(0, Vec::len)
    }

    /// Re-dispatch of unit `i` at period `t` for the deviation vector `eps[k]`.
    pub fn redispatch(&self, i: usize, t: usize, eps: impl Fn(usize) -> f64) -> f64 {
        let mut p = self.p_hat[i][t];
        for k in 0..self.eps_l.len() {
            p += self.b_coef[i][k][t] * eps(k) + self.b_const[i][k][t];
        }
        p
    }

    /// Per-period admissible range `Σ_k (μ + ε^{L/U})`, MW.
    pub fn admissible_range(&self, ambiguity: &AmbiguitySet) -> Vec<(f64, f64)> {
        (0..self.periods())
            .map(|t| {
                let lo = (0..self.eps_l.len()).map(|k| ambiguity.mean[k][t] + self.eps_l[k][t]).sum();
                let hi = (0..self.eps_u.len()).map(|k| ambiguity.mean[k][t] + self.eps_u[k][t]).sum();
                (lo, hi)
            })
            .collect()
    }

    /// Sectioned delimited text; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[summary]");
        let _ = writeln!(s, "key,value");
        let kv = |s: &mut String, k: &str, v: String| {
            let _ = writeln!(s, "{k},{v}");
        };
        kv(&mut s, "status", self.status.to_string());
        kv(&mut s, "delta", self.delta.to_string());
        kv(&mut s, "u0", self.u0.to_string());
        kv(&mut s, "u", self.u.to_string());
        kv(&mut s, "dispatch_cost", self.objective.dispatch_cost.to_string());
        kv(&mut s, "utilization_term", self.objective.utilization_term.to_string());
        kv(&mut s, "expected_plus_term", self.objective.expected_plus_term.to_string());
        kv(&mut s, "expected_minus_term", self.objective.expected_minus_term.to_string());
        kv(&mut s, "objective", self.objective.total.to_string());
        kv(&mut s, "iterations", self.iterations.to_string());
        kv(&mut s, "agc", self.agc.iter().map(|&a| if a { "1" } else { "0" }).collect::<Vec<_>>().join(" "));
        let _ = writeln!(s, "[predispatch]");
        let _ = writeln!(s, "gen,period,p_hat");
        for (i, row) in self.p_hat.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                let _ = writeln!(s, "{},{},{v}", i + 1, t + 1);
            }
        }
        let _ = writeln!(s, "[dne]");
        let _ = writeln!(s, "renewable,period,eps_l,eps_u,r,s,z");
        let get = |m: &Vec<Vec<f64>>, k: usize, t: usize| m.get(k).and_then(|r| r.get(t)).copied().unwrap_or(f64::NAN);
        for k in 0..self.eps_l.len() {
            for t in 0..self.periods() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    k + 1,
                    t + 1,
                    self.eps_l[k][t],
                    self.eps_u[k][t],
                    get(&self.r, k, t),
                    get(&self.s_budget, k, t),
                    get(&self.z, k, t)
                );
            }
        }
        let _ = writeln!(s, "[policy]");
        let _ = writeln!(s, "gen,renewable,period,S,s0,B,b");
        for i in 0..self.p_hat.len() {
            for k in 0..self.eps_l.len() {
                for t in 0..self.periods() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        i + 1,
                        k + 1,
                        t + 1,
                        self.s[i][k][t],
                        self.s0[i][k][t],
                        self.b_coef[i][k][t],
                        self.b_const[i][k][t]
                    );
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut header_seen = false;
        let mut summary = std::collections::HashMap::new();
        let mut pre = Vec::new();
        let mut dne = Vec::new();
        let mut pol = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                section = line.trim_matches(|c| c == '[' || c == ']').to_string();
                header_seen = false;
                continue;
            }
            if !header_seen {
                header_seen = true;
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            let lineno = idx + 1;
            let nums = |from: usize| -> Result<Vec<f64>> {
                cells[from..]
                    .iter()
                    .map(|c| c.trim().parse::<f64>().map_err(|_| Error::Parse { line: lineno, message: format!("bad number `{c}`") }))
                    .collect()
            };
            match section.as_str() {
                "summary" => {
                    if cells.len() != 2 {
                        return Err(Error::Parse { line: lineno, message: "summary rows are key,value".into() });
                    }
                    summary.insert(cells[0].to_string(), cells[1].to_string());
                }
                "predispatch" => pre.push(nums(0)?),
                "dne" => dne.push(nums(0)?),
                "policy" => pol.push(nums(0)?),
                other => return Err(Error::Parse { line: lineno, message: format!("unknown section `{other}`") }),
            }
        }
        let num = |k: &str| -> Result<f64> {
            summary
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse { line: 0, message: format!("summary lacks `{k}`") })
        };
        let status = match summary.get("status").map(String::as_str) {
            Some("optimal") => SolveStatus::Optimal,
            Some("infeasible") => SolveStatus::Infeasible,
            Some("unbounded") => SolveStatus::Unbounded,
            Some("numerical-limit") => SolveStatus::NumericalLimit,
            other => return Err(Error::Parse { line: 0, message: format!("unknown status {other:?}") }),
        };
        let agc: Vec<bool> = summary
            .get("agc")
            .map(|v| v.split_whitespace().map(|x| x == "1").collect())
            .unwrap_or_default();
        let dims = |rows: &Vec<Vec<f64>>, cols: usize| -> Vec<usize> {
            (0..cols).map(|c| rows.iter().map(|r| r[c] as usize).max().unwrap_or(0)).collect()
        };
        for (name, rows, width) in [("predispatch", &pre, 3), ("dne", &dne, 7), ("policy", &pol, 7)] {
            if rows.iter().any(|r| r.len() != width) {
                return Err(Error::Parse { line: 0, message: format!("section `{name}` has rows of the wrong width") });
            }
        }
        let d = dims(&pre, 2);
        let (ni, nt) = (d[0], d[1]);
        let nk = dims(&dne, 1)[0];
        let mut p_hat = vec![vec![0.0; nt]; ni];
        for r in &pre {
            p_hat[r[0] as usize - 1][r[1] as usize - 1] = r[2];
        }
        let kt = || vec![vec![0.0; nt]; nk];
        let (mut eps_l, mut eps_u, mut rr, mut ss, mut zz) = (kt(), kt(), kt(), kt(), kt());
        for r in &dne {
            let (k, t) = (r[0] as usize - 1, r[1] as usize - 1);
            eps_l[k][t] = r[2];
            eps_u[k][t] = r[3];
            rr[k][t] = r[4];
            ss[k][t] = r[5];
            zz[k][t] = r[6];
        }
        let ikt = || vec![vec![vec![0.0; nt]; nk]; ni];
        let (mut s, mut s0, mut bc, mut bk) = (ikt(), ikt(), ikt(), ikt());
        for r in &pol {
            let (i, k, t) = (r[0] as usize - 1, r[1] as usize - 1, r[2] as usize - 1);
            s[i][k][t] = r[3];
            s0[i][k][t] = r[4];
            bc[i][k][t] = r[5];
            bk[i][k][t] = r[6];
        }
        let strip_nan = |m: Vec<Vec<f64>>| if m.iter().flatten().all(|v| v.is_nan()) { Vec::new() } else { m };
        Ok(DneSolution {
            delta: num("delta")?,
            u0: num("u0")?,
            agc,
            p_hat,
            s,
            s0,
            b_coef: bc,
            b_const: bk,
            eps_l,
            eps_u,
            u: num("u")?,
            r: strip_nan(rr),
            s_budget: strip_nan(ss),
            z: strip_nan(zz),
            objective: ObjectiveBreakdown {
                dispatch_cost: num("dispatch_cost")?,
                utilization_term: num("utilization_term")?,
                expected_plus_term: num("expected_plus_term")?,
                expected_minus_term: num("expected_minus_term")?,
                total: num("objective")?,
            },
            status,
            solve_time: 0.0,
            iterations: num("iterations")? as u32,
            verification: None,
        })
    }
}

/// Reads primal values back into a [`DneSolution`] and recovers `B`, `b`.
pub fn extract_solution(model: &DrcoModel<'_>, sol: &Solution, delta: f64, u0: f64) -> DneSolution {
    let case = model.case;
    let map = &model.map;
    let (ni, nk, nt) = (case.generators.len(), case.renewables.len(), case.periods());
    let val = |v: &Var| sol.value(*v);
    let grid = |m: &Vec<Vec<Var>>| -> Vec<Vec<f64>> { m.iter().map(|r| r.iter().map(val).collect()).collect() };
    let eps_l = grid(&map.eps_l);
    let eps_u = grid(&map.eps_u);
    let opt = |m: &Vec<Vec<Vec<Option<Var>>>>| -> Vec<Vec<Vec<f64>>> {
        m.iter().map(|a| a.iter().map(|b| b.iter().map(|v| v.map_or(0.0, |v| sol.value(v))).collect()).collect()).collect()
    };
    let s = opt(&map.s);
    let s0 = opt(&map.s0);
    let mut b_coef = vec![vec![vec![0.0; nt]; nk]; ni];
    let mut b_const = vec![vec![vec![0.0; nt]; nk]; ni];
    for i in 0..ni {
        for k in 0..nk {
            for t in 0..nt {
                let e = eps_u[k][t] - eps_l[k][t];
                if e >= ZERO_WIDTH {
                    b_coef[i][k][t] = s[i][k][t] / e;
                    b_const[i][k][t] = s0[i][k][t] - b_coef[i][k][t] * eps_l[k][t];
                } else {
                    b_const[i][k][t] = s0[i][k][t];
                }
            }
        }
    }
    let dispatch_cost: f64 = case
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| (0..nt).map(|t| g.cost.eval(sol.value(map.p_hat[i][t]))).sum::<f64>())
        .sum();
    let u = map.u.map_or(f64::NAN, |u| sol.value(u));
    let utilization_term = if map.u.is_some() { -delta * u } else { 0.0 };
    DneSolution {
        delta,
        u0,
        agc: model.agc.clone(),
        p_hat: grid(&map.p_hat),
        s,
        s0,
        b_coef,
        b_const,
        eps_l,
        eps_u,
        u,
        r: grid(&map.r),
        s_budget: grid(&map.s_budget),
        z: grid(&map.z),
        objective: ObjectiveBreakdown {
            dispatch_cost,
            utilization_term,
            expected_plus_term: 0.0,
            expected_minus_term: 0.0,
            total: sol.objective,
        },
        status: sol.status,
        solve_time: sol.solve_time,
        iterations: sol.iterations,
        verification: None,
    }
}

/// Notes on periods whose load cannot be met even at full output.
pub fn capacity_warnings(case: &GridCase) -> Vec<String> {
    let cap: f64 = case.generators.iter().map(|g| g.p_max).sum();
    (0..case.periods())
        .filter_map(|t| {
            let need = case.total_load(t);
            let have = cap + case.total_forecast(t);
            (have < need).then(|| format!("period {}: p_max + forecast = {have} MW < load {need} MW", t + 1))
        })
        .collect()
}

/// Assembled program and its variable map, before solving.
pub fn build_drco<'a>(case: &'a GridCase, ambiguity: &'a AmbiguitySet, config: &SolveConfig) -> Result<(DrcoModel<'a>, Option<crate::expected_cost::ExtensionVars>)> {
    config.validate()?;
    let agc = config.agc_mask(case)?;
    let mut model = DrcoModel::new(case, ambiguity, agc)?;
    model.build_nominal_ed();
    model.build_robust_box();
    model.build_chance_socp(config.u0)?;
    model.build_objective(config.delta, config.cost_encoding)?;
    let ext = match &config.extension {
        Some(e) if e.delta_plus > 0.0 || e.delta_minus > 0.0 => Some(crate::expected_cost::extend_drco(&mut model, e)?),
        _ => None,
    };
    Ok((model, ext))
}

/// Builds and solves the co-optimization model.
pub fn solve_drco(case: &GridCase, ambiguity: &AmbiguitySet, config: &SolveConfig) -> Result<DneSolution> {
    let (mut model, ext) = build_drco(case, ambiguity, config)?;
    let program = std::mem::take(&mut model.builder).build()?;
    let sol = conic::solve(&program, &config.settings)?;
    finish(&model, ext.as_ref(), &program, &sol, config.delta, config.u0)
}

pub(crate) fn finish(
    model: &DrcoModel<'_>,
    ext: Option<&crate::expected_cost::ExtensionVars>,
    program: &ConicProgram,
    sol: &Solution,
    delta: f64,
    u0: f64,
) -> Result<DneSolution> {
    if !sol.is_optimal() {
        let mut diagnostics = sol.diagnostics.clone();
        if sol.status == SolveStatus::Infeasible {
            for w in capacity_warnings(model.case) {
                let _ = write!(diagnostics, "; {w}");
            }
        }
        return Err(Error::Solve { status: sol.status, diagnostics });
    }
    let mut out = extract_solution(model, sol, delta, u0);
    if let Some(ext) = ext {
        let (plus, minus) = ext.terms(sol);
        out.objective.expected_plus_term = plus;
        out.objective.expected_minus_term = minus;
    }
    out.verification = Some(conic::verify(program, &sol.primal, 1e-6));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_case;

    fn single_gen(load: f64, cost: &str) -> GridCase {
        parse_case(&format!(
            "mpc.time = [ 1 60 5 ];\nmpc.bus = [ 1 3 {load} 0 ];\nmpc.branch = [ ];\n\
             mpc.gen = [ 1 0 0 0 0 1 100 1 100 0 ];\nmpc.gencost = [ {cost} ];\n"
        ))
        .unwrap()
    }

    fn solve_nominal(case: &GridCase, delta: f64) -> (f64, Vec<f64>, f64) {
        let amb = AmbiguitySet::new(vec![], vec![]).unwrap();
        let mut m = DrcoModel::new(case, &amb, vec![true; case.generators.len()]).unwrap();
        m.build_nominal_ed();
        m.build_objective(delta, CostEncoding::SocEpigraph).unwrap();
        let cost = m.cost.clone();
        let p = m.build_p();
        let prog = m.builder.build().unwrap();
        let sol = conic::solve(&prog, &SolverSettings::default()).unwrap();
        assert!(sol.is_optimal(), "{}", sol.diagnostics);
        (sol.objective, p.iter().map(|v| sol.value(*v)).collect(), cost.eval(&sol.primal))
    }

    impl DrcoModel<'_> {
        fn build_p(&self) -> Vec<Var> {
            self.map.p_hat.iter().map(|r| r[0]).collect()
        }
    }

    #[test]
    fn linear_cost_single_period() {
        let (obj, p, _) = solve_nominal(&single_gen(50.0, "2 0 0 2 2 0"), 0.0);
        assert!((p[0] - 50.0).abs() < 1e-6);
        assert!((obj - 100.0).abs() < 1e-5);
    }

    #[test]
    fn quadratic_epigraph_is_tight() {
        let (obj, p, cost) = solve_nominal(&single_gen(3.0, "2 0 0 3 1 0 0"), 0.0);
        assert!((p[0] - 3.0).abs() < 1e-6);
        assert!((obj - 9.0).abs() < 1e-5);
        assert!((cost - 9.0).abs() < 1e-5);
    }

    #[test]
    fn box_row_worst_case() {
        assert_eq!(box_worst_case(0.0, &[3.0, -2.0]), 3.0);
        // Same row through the builder: max over v of 3v₁ − 2v₂ ≤ x, minimize x.
        let mut b = ProgramBuilder::new();
        let x = b.free_var();
        let c1 = b.add_var(3.0, 3.0);
        let c2 = b.add_var(-2.0, -2.0);
        add_box_row(&mut b, LinExpr::new().term(x, -1.0), vec![LinExpr::var(c1), LinExpr::var(c2)]);
        b.add_objective(x, 1.0);
        let sol = conic::solve(&b.build().unwrap(), &SolverSettings::default()).unwrap();
        assert!((sol.value(x) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn u0_hypothesis_enforced() {
        let cfg = SolveConfig { u0: 0.6, ..SolveConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("2/3")));
    }

    #[test]
    fn half_width_matches_gauss() {
        for u in [0.75, 8.0 / 9.0] {
            let (h, _, _) = minimal_half_width(0.0, 1.0, u, &SolverSettings::default()).unwrap();
            let want = gauss_min_half_width(1.0, u);
            assert!((h - want).abs() <= 1e-6 * want, "u={u}: {h} vs {want}");
        }
        assert!((gauss_min_half_width(1.0, 0.75) - 4.0 / 3.0).abs() < 1e-12);
        assert!((gauss_min_half_width(1.0, 8.0 / 9.0) - 2.0).abs() < 1e-12);
    }
}
