//! Solver-agnostic conic program representation.
//!
//! A [`ConicProgram`] is a linear objective over a vector of scalar variables
//! subject to linear equalities, linear inequalities, variable bounds,
//! second-order cones over variable tuples and positive-semidefinite cones over
//! symmetric matrices of affine expressions. Programs are assembled with a
//! [`ProgramBuilder`], solved through a [`ConicBackend`], and checked
//! independently of the backend with [`verify`].

use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Index of a scalar decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

/// Affine expression `constant + Σ coef·x[var]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(value: f64) -> Self {
        Self { terms: Vec::new(), constant: value }
    }

    pub fn var(v: Var) -> Self {
        Self { terms: vec![(v, 1.0)], constant: 0.0 }
    }

    pub fn term(mut self, v: Var, coef: f64) -> Self {
        self.push(v, coef);
        self
    }

    pub fn plus(mut self, value: f64) -> Self {
        self.constant += value;
        self
    }

    pub fn push(&mut self, v: Var, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) {
        for &(v, c) in &other.terms {
            self.push(v, c * scale);
        }
        self.constant += other.constant * scale;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v.0]).sum::<f64>()
    }

    /// Merges duplicate variables and drops exact zeros.
    pub fn compact(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(Var, f64)> = Vec::with_capacity(self.terms.len());
        for (v, c) in self.terms {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
        self
    }
}

/// A single linear row `Σ coef·x ⋈ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(Var, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn lhs(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v.0]).sum()
    }
}

/// `x[indices[0]] ≥ ‖(x[indices[1]], …)‖₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocCone {
    pub indices: Vec<Var>,
}

/// Symmetric `dim × dim` matrix of affine expressions required to be PSD.
///
/// `entries` holds the upper triangle in column-major order:
/// (0,0), (0,1), (1,1), (0,2), (1,2), (2,2), …
#[derive(Debug, Clone, PartialEq)]
pub struct PsdCone {
    pub dim: usize,
    pub entries: Vec<LinExpr>,
}

impl PsdCone {
    pub fn triangle_index(row: usize, col: usize) -> usize {
        let (r, c) = if row <= col { (row, col) } else { (col, row) };
        c * (c + 1) / 2 + r
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for c in 0..self.dim {
            for r in 0..=c {
                let v = self.entries[Self::triangle_index(r, c)].eval(x);
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub objective_constant: f64,
    pub equalities: Vec<LinearRow>,
    pub inequalities: Vec<LinearRow>,
    pub socs: Vec<SocCone>,
    pub psds: Vec<PsdCone>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConicProgram {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars;
        let bad = |what: &str| Err(Error::InvalidProgram(what.to_string()));
        if self.objective.len() != n || self.lower.len() != n || self.upper.len() != n {
            return bad("objective/bound vectors do not match the variable count");
        }
        let rows = self.equalities.iter().chain(&self.inequalities);
        for row in rows {
            if row.terms.iter().any(|t| t.0 .0 >= n) {
                return bad("linear row references an unknown variable");
            }
            if !row.rhs.is_finite() {
                return bad("linear row has a non-finite right-hand side");
            }
        }
        for (k, soc) in self.socs.iter().enumerate() {
            if soc.indices.len() < 2 {
                return Err(Error::InvalidProgram(format!("SOC {k} has fewer than 2 members")));
            }
            if soc.indices.iter().any(|v| v.0 >= n) {
                return Err(Error::InvalidProgram(format!("SOC {k} references an unknown variable")));
            }
        }
        for (k, psd) in self.psds.iter().enumerate() {
            if psd.dim == 0 || psd.entries.len() != psd.dim * (psd.dim + 1) / 2 {
                return Err(Error::InvalidProgram(format!("PSD block {k} has a malformed triangle")));
            }
            if psd.entries.iter().flat_map(|e| &e.terms).any(|t| t.0 .0 >= n) {
                return Err(Error::InvalidProgram(format!("PSD block {k} references an unknown variable")));
            }
        }
        for j in 0..n {
            if self.lower[j] > self.upper[j] {
                return Err(Error::InvalidProgram(format!("variable {j} has lower bound above upper bound")));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective_constant + self.objective.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

/// Incremental construction of a [`ConicProgram`].
#[derive(Debug, Clone, Default)]
pub struct ProgramBuilder {
    objective: Vec<f64>,
    objective_constant: f64,
    equalities: Vec<LinearRow>,
    inequalities: Vec<LinearRow>,
    socs: Vec<SocCone>,
    psds: Vec<PsdCone>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn add_var(&mut self, lower: f64, upper: f64) -> Var {
        self.lower.push(lower);
        self.upper.push(upper);
        self.objective.push(0.0);
        Var(self.lower.len() - 1)
    }

    pub fn free_var(&mut self) -> Var {
        self.add_var(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn nonneg_var(&mut self) -> Var {
        self.add_var(0.0, f64::INFINITY)
    }

    pub fn fix(&mut self, v: Var, value: f64) {
        self.add_eq(LinExpr::var(v).plus(-value));
    }

    pub fn tighten_lower(&mut self, v: Var, value: f64) {
        self.lower[v.0] = self.lower[v.0].max(value);
    }

    pub fn tighten_upper(&mut self, v: Var, value: f64) {
        self.upper[v.0] = self.upper[v.0].min(value);
    }

    pub fn add_objective(&mut self, v: Var, coef: f64) {
        self.objective[v.0] += coef;
    }

    pub fn add_objective_constant(&mut self, value: f64) {
        self.objective_constant += value;
    }

    /// `expr = 0`.
    pub fn add_eq(&mut self, expr: LinExpr) {
        let expr = expr.compact();
        self.equalities.push(LinearRow { terms: expr.terms, rhs: -expr.constant });
    }

    /// `expr ≤ 0`.
    pub fn add_le(&mut self, expr: LinExpr) {
        let expr = expr.compact();
        self.inequalities.push(LinearRow { terms: expr.terms, rhs: -expr.constant });
    }

    /// `expr ≥ 0`.
    pub fn add_ge(&mut self, expr: LinExpr) {
        let mut neg = LinExpr::new();
        neg.add_expr(&expr, -1.0);
        self.add_le(neg);
    }

    pub fn add_soc(&mut self, indices: Vec<Var>) {
        self.socs.push(SocCone { indices });
    }

    /// `‖(exprs[1], …)‖₂ ≤ exprs[0]`, introducing one auxiliary variable per
    /// non-trivial member so the cone itself stays over variable indices.
    pub fn add_soc_affine(&mut self, exprs: Vec<LinExpr>) -> Vec<Var> {
        let members: Vec<Var> = exprs
            .into_iter()
            .map(|e| {
                let e = e.compact();
                if e.constant == 0.0 && e.terms.len() == 1 && e.terms[0].1 == 1.0 {
                    e.terms[0].0
                } else {
                    let aux = self.free_var();
                    let mut row = e;
                    row.push(aux, -1.0);
                    self.add_eq(row);
                    aux
                }
            })
            .collect();
        self.add_soc(members.clone());
        members
    }

    pub fn add_psd(&mut self, dim: usize, entries: Vec<LinExpr>) {
        let entries = entries.into_iter().map(LinExpr::compact).collect();
        self.psds.push(PsdCone { dim, entries });
    }

    pub fn build(self) -> Result<ConicProgram> {
        let program = ConicProgram {
            num_vars: self.lower.len(),
            objective: self.objective,
            objective_constant: self.objective_constant,
            equalities: self.equalities,
            inequalities: self.inequalities,
            socs: self.socs,
            psds: self.psds,
            lower: self.lower,
            upper: self.upper,
        };
        program.validate()?;
        Ok(program)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalLimit,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalLimit => "numerical-limit",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub primal: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub solve_time: f64,
    pub iterations: u32,
    /// Backend status text and, for downgraded solves, the failing residuals.
    pub diagnostics: String,
}

impl Solution {
    pub fn value(&self, v: Var) -> f64 {
        self.primal[v.0]
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol_feas: f64,
    pub tol_gap_rel: f64,
    pub tol_gap_abs: f64,
    pub max_iter: u32,
    pub time_limit: f64,
    /// Residual threshold for accepting an optimal status.
    pub verify_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_feas: 1e-8,
            tol_gap_rel: 1e-8,
            tol_gap_abs: 1e-8,
            max_iter: 200,
            time_limit: f64::INFINITY,
            verify_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub psd: bool,
}

/// Contract for conic solvers. Implementations must never report
/// [`SolveStatus::Optimal`] for a point that fails [`verify`].
pub trait ConicBackend: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn solve(&self, program: &ConicProgram, settings: &SolverSettings) -> Result<Solution>;
}

/// Interior-point backend built on Clarabel.
#[derive(Debug, Clone)]
pub struct ClarabelBackend {
    psd: bool,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self { psd: true }
    }
}

impl ClarabelBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same solver registered without PSD support.
    pub fn soc_only() -> Self {
        Self { psd: false }
    }
}

/// Row-major triplets and cone list in Clarabel's `s = b − A x` convention.
struct Standardized {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

impl Standardized {
    fn new() -> Self {
        Self { rows: Vec::new(), cols: Vec::new(), vals: Vec::new(), rhs: Vec::new(), cones: Vec::new() }
    }

    fn push_row(&mut self, terms: &[(Var, f64)], rhs: f64) {
        let r = self.rhs.len();
        for &(v, c) in terms {
            self.rows.push(r);
            self.cols.push(v.0);
            self.vals.push(c);
        }
        self.rhs.push(rhs);
    }

    fn extend_cone(&mut self, cone: SupportedConeT<f64>) {
        use SupportedConeT::*;
        match (self.cones.last_mut(), &cone) {
            (Some(ZeroConeT(n)), ZeroConeT(m)) => *n += m,
            (Some(NonnegativeConeT(n)), NonnegativeConeT(m)) => *n += m,
            _ => self.cones.push(cone),
        }
    }
}

fn standardize(program: &ConicProgram) -> Standardized {
    let mut s = Standardized::new();
    for row in &program.equalities {
        s.push_row(&row.terms, row.rhs);
        s.extend_cone(SupportedConeT::ZeroConeT(1));
    }
    let mut nonneg = 0;
    for row in &program.inequalities {
        s.push_row(&row.terms, row.rhs);
        nonneg += 1;
    }
    for j in 0..program.num_vars {
        if program.lower[j].is_finite() {
            s.push_row(&[(Var(j), -1.0)], -program.lower[j]);
            nonneg += 1;
        }
        if program.upper[j].is_finite() {
            s.push_row(&[(Var(j), 1.0)], program.upper[j]);
            nonneg += 1;
        }
    }
    if nonneg > 0 {
        s.extend_cone(SupportedConeT::NonnegativeConeT(nonneg));
    }
    for soc in &program.socs {
        for &v in &soc.indices {
            s.push_row(&[(v, -1.0)], 0.0);
        }
        s.cones.push(SupportedConeT::SecondOrderConeT(soc.indices.len()));
    }
    for psd in &program.psds {
        for c in 0..psd.dim {
            for r in 0..=c {
                let scale = if r == c { 1.0 } else { std::f64::consts::SQRT_2 };
                let e = &psd.entries[PsdCone::triangle_index(r, c)];
                let terms: Vec<(Var, f64)> = e.terms.iter().map(|&(v, k)| (v, -k * scale)).collect();
                s.push_row(&terms, e.constant * scale);
            }
        }
        s.cones.push(SupportedConeT::PSDTriangleConeT(psd.dim));
    }
    s
}

impl ConicBackend for ClarabelBackend {
    fn name(&self) -> &str {
        if self.psd {
            "clarabel"
        } else {
            "clarabel (soc-only)"
        }
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { psd: self.psd }
    }

    fn solve(&self, program: &ConicProgram, settings: &SolverSettings) -> Result<Solution> {
        program.validate()?;
        if !program.psds.is_empty() && !self.psd {
            return Err(Error::Capability(format!("backend `{}` does not support PSD cones", self.name())));
        }
        let start = Instant::now();
        let n = program.num_vars;
        let std = standardize(program);
        let m = std.rhs.len();
        let a = CscMatrix::new_from_triplets(m, n, std.rows, std.cols, std.vals);
        let p = CscMatrix::<f64>::zeros((n, n));
        let clarabel_settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(settings.max_iter)
            .time_limit(settings.time_limit)
            .tol_feas(settings.tol_feas)
            .tol_gap_rel(settings.tol_gap_rel)
            .tol_gap_abs(settings.tol_gap_abs)
            .max_threads(1)
            .build()
            .map_err(|e| Error::Backend(format!("invalid solver settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &program.objective, &a, &std.rhs, &std.cones, clarabel_settings)
            .map_err(|e| Error::Backend(format!("solver setup failed: {e:?}")))?;
        solver.solve();
        let raw = &solver.solution;
        let mut status = match raw.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::NumericalLimit,
        };
        let primal = raw.x.clone();
        let mut diagnostics = format!("{:?} after {} iterations", raw.status, raw.iterations);
        // AlmostSolved points are accepted only when they pass verification.
        if matches!(raw.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
            let report = verify(program, &primal, settings.verify_tol);
            if report.pass {
                status = SolveStatus::Optimal;
            } else {
                status = SolveStatus::NumericalLimit;
                let _ = write!(diagnostics, "; verification failed: {}", report.summary());
            }
        }
        Ok(Solution {
            objective: program.objective_value(&primal),
            primal,
            status,
            solve_time: start.elapsed().as_secs_f64(),
            iterations: raw.iterations,
            diagnostics,
        })
    }
}

/// Solves with the default backend.
pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> Result<Solution> {
    ClarabelBackend::new().solve(program, settings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub max_equality: f64,
    /// Includes variable bound violations.
    pub max_inequality: f64,
    pub max_soc: f64,
    /// `+∞` when the program has no PSD blocks.
    pub min_psd_eigenvalue: f64,
    pub worst_psd_block: Option<usize>,
    pub tol: f64,
    pub pass: bool,
}

impl ResidualReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "eq={:.3e} ineq={:.3e} soc={:.3e}",
            self.max_equality, self.max_inequality, self.max_soc
        );
        if let Some(b) = self.worst_psd_block {
            let _ = write!(s, " psd_min_eig={:.3e} (block {b})", self.min_psd_eigenvalue);
        }
        s
    }
}

/// Backend-independent residual check of a primal point.
pub fn verify(program: &ConicProgram, x: &[f64], tol: f64) -> ResidualReport {
    let max_equality = program
        .equalities
        .iter()
        .map(|r| (r.lhs(x) - r.rhs).abs())
        .fold(0.0, f64::max);
    let mut max_inequality = program
        .inequalities
        .iter()
        .map(|r| (r.lhs(x) - r.rhs).max(0.0))
        .fold(0.0, f64::max);
    for j in 0..program.num_vars {
        max_inequality = max_inequality
            .max(program.lower[j] - x[j])
            .max(x[j] - program.upper[j]);
    }
    let max_soc = program
        .socs
        .iter()
        .map(|c| {
            let head = x[c.indices[0].0];
            let tail = c.indices[1..].iter().map(|v| x[v.0].powi(2)).sum::<f64>().sqrt();
            (tail - head).max(0.0)
        })
        .fold(0.0, f64::max);
    let mut min_psd_eigenvalue = f64::INFINITY;
    let mut worst_psd_block = None;
    for (k, psd) in program.psds.iter().enumerate() {
        let eig = psd.eval(x).symmetric_eigenvalues().min();
        if eig < min_psd_eigenvalue {
            min_psd_eigenvalue = eig;
            worst_psd_block = Some(k);
        }
    }
    let pass = max_equality <= tol
        && max_inequality <= tol
        && max_soc <= tol
        && min_psd_eigenvalue >= -tol
        && x.iter().all(|v| v.is_finite());
    ResidualReport {
        max_equality,
        max_inequality,
        max_soc,
        min_psd_eigenvalue,
        worst_psd_block,
        tol,
        pass,
    }
}

fn fmt_bound(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:e}")
    }
}

/// Plain-text dump: one record per line, whitespace separated.
///
/// ```text
/// conic-program 1
/// vars <n>
/// objconst <c>
/// obj <j> <coef>
/// bound <j> <lo> <hi>
/// eq <row> <j> <coef>        eqrhs <row> <rhs>
/// le <row> <j> <coef>        lerhs <row> <rhs>
/// soc <j0> <j1> ...
/// psd <block> <dim>
/// psdterm <block> <entry> <j> <coef>
/// psdconst <block> <entry> <value>
/// ```
pub fn dump_program(program: &ConicProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "conic-program 1");
    let _ = writeln!(out, "vars {}", program.num_vars);
    let _ = writeln!(out, "objconst {:e}", program.objective_constant);
    for (j, &c) in program.objective.iter().enumerate() {
        if c != 0.0 {
            let _ = writeln!(out, "obj {j} {c:e}");
        }
    }
    for j in 0..program.num_vars {
        let (lo, hi) = (program.lower[j], program.upper[j]);
        if lo != f64::NEG_INFINITY || hi != f64::INFINITY {
            let _ = writeln!(out, "bound {j} {} {}", fmt_bound(lo), fmt_bound(hi));
        }
    }
    for (tag, rows) in [("eq", &program.equalities), ("le", &program.inequalities)] {
        for (i, row) in rows.iter().enumerate() {
            for &(v, c) in &row.terms {
                let _ = writeln!(out, "{tag} {i} {} {c:e}", v.0);
            }
            let _ = writeln!(out, "{tag}rhs {i} {:e}", row.rhs);
        }
    }
    for soc in &program.socs {
        let idx: Vec<String> = soc.indices.iter().map(|v| v.0.to_string()).collect();
        let _ = writeln!(out, "soc {}", idx.join(" "));
    }
    for (b, psd) in program.psds.iter().enumerate() {
        let _ = writeln!(out, "psd {b} {}", psd.dim);
        for (e, expr) in psd.entries.iter().enumerate() {
            for &(v, c) in &expr.terms {
                let _ = writeln!(out, "psdterm {b} {e} {} {c:e}", v.0);
            }
            if expr.constant != 0.0 {
                let _ = writeln!(out, "psdconst {b} {e} {:e}", expr.constant);
            }
        }
    }
    out
}

pub fn load_program(text: &str) -> Result<ConicProgram> {
    let mut num_vars = None;
    let mut program = ConicProgram {
        num_vars: 0,
        objective: Vec::new(),
        objective_constant: 0.0,
        equalities: Vec::new(),
        inequalities: Vec::new(),
        socs: Vec::new(),
        psds: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    fn row_at(rows: &mut Vec<LinearRow>, i: usize) -> &mut LinearRow {
        while rows.len() <= i {
            rows.push(LinearRow { terms: Vec::new(), rhs: 0.0 });
        }
        &mut rows[i]
    }
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse { line: lineno + 1, message: msg.to_string() };
        let toks: Vec<&str> = line.split_whitespace().collect();
        let int = |k: usize| -> Result<usize> {
            toks.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| err("expected an integer"))
        };
        let num = |k: usize| -> Result<f64> {
            toks.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| err("expected a number"))
        };
        let need_vars = |n: Option<usize>| n.ok_or_else(|| err("`vars` must precede other records"));
        match toks[0] {
            "conic-program" => {
                if toks.get(1) != Some(&"1") {
                    return Err(err("unsupported format version"));
                }
            }
            "vars" => {
                let n = int(1)?;
                num_vars = Some(n);
                program.num_vars = n;
                program.objective = vec![0.0; n];
                program.lower = vec![f64::NEG_INFINITY; n];
                program.upper = vec![f64::INFINITY; n];
            }
            "objconst" => program.objective_constant = num(1)?,
            "obj" => {
                let n = need_vars(num_vars)?;
                let j = int(1)?;
                if j >= n {
                    return Err(err("variable index out of range"));
                }
                program.objective[j] = num(2)?;
            }
            "bound" => {
                let n = need_vars(num_vars)?;
                let j = int(1)?;
                if j >= n {
                    return Err(err("variable index out of range"));
                }
                program.lower[j] = num(2)?;
                program.upper[j] = num(3)?;
            }
            "eq" | "le" => {
                let rows = if toks[0] == "eq" { &mut program.equalities } else { &mut program.inequalities };
                let (i, j, c) = (int(1)?, int(2)?, num(3)?);
                row_at(rows, i).terms.push((Var(j), c));
            }
            "eqrhs" | "lerhs" => {
                let rows = if toks[0] == "eqrhs" { &mut program.equalities } else { &mut program.inequalities };
                let (i, v) = (int(1)?, num(2)?);
                row_at(rows, i).rhs = v;
            }
            "soc" => {
                let idx = (1..toks.len()).map(|k| int(k).map(Var)).collect::<Result<Vec<_>>>()?;
                program.socs.push(SocCone { indices: idx });
            }
            "psd" => {
                let (b, dim) = (int(1)?, int(2)?);
                if b != program.psds.len() {
                    return Err(err("PSD blocks must be declared in order"));
                }
                program.psds.push(PsdCone { dim, entries: vec![LinExpr::new(); dim * (dim + 1) / 2] });
            }
            "psdterm" | "psdconst" => {
                let (b, e) = (int(1)?, int(2)?);
                let block = program.psds.get_mut(b).ok_or_else(|| err("undeclared PSD block"))?;
                let entry = block.entries.get_mut(e).ok_or_else(|| err("PSD entry out of range"))?;
                if toks[0] == "psdterm" {
                    entry.terms.push((Var(int(3)?), num(4)?));
                } else {
                    entry.constant = num(3)?;
                }
            }
            other => return Err(err(&format!("unknown record `{other}`"))),
        }
    }
    if num_vars.is_none() {
        return Err(Error::Parse { line: 0, message: "missing `vars` record".into() });
    }
    program.validate()?;
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve_ok(p: &ConicProgram) -> Solution {
        let s = solve(p, &SolverSettings::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal, "{}", s.diagnostics);
        s
    }

    #[test]
    fn linear_lower_bound() {
        let mut b = ProgramBuilder::new();
        let x = b.free_var();
        b.add_ge(LinExpr::var(x).plus(-3.0));
        b.add_objective(x, 1.0);
        let p = b.build().unwrap();
        let s = solve_ok(&p);
        assert!((s.value(x) - 3.0).abs() < 1e-7);
        assert!(verify(&p, &s.primal, 1e-6).pass);
    }

    #[test]
    fn soc_identity() {
        let mut b = ProgramBuilder::new();
        let t = b.free_var();
        b.add_soc_affine(vec![LinExpr::var(t), LinExpr::constant(1.0), LinExpr::constant(1.0)]);
        b.add_objective(t, 1.0);
        let p = b.build().unwrap();
        let s = solve_ok(&p);
        assert!((s.objective - 2f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn psd_two_by_two() {
        let mut b = ProgramBuilder::new();
        let x = b.free_var();
        b.add_psd(2, vec![LinExpr::var(x), LinExpr::constant(1.0), LinExpr::var(x)]);
        b.add_objective(x, 1.0);
        let p = b.build().unwrap();
        let s = solve_ok(&p);
        assert!((s.value(x) - 1.0).abs() < 1e-6);
        assert!(verify(&p, &s.primal, 1e-6).pass);
    }

    #[test]
    fn soc_only_backend_refuses_psd() {
        let mut b = ProgramBuilder::new();
        let x = b.free_var();
        b.add_psd(1, vec![LinExpr::var(x)]);
        let p = b.build().unwrap();
        let err = ClarabelBackend::soc_only().solve(&p, &SolverSettings::default()).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn infeasible_is_reported() {
        let mut b = ProgramBuilder::new();
        let x = b.add_var(0.0, 1.0);
        b.add_ge(LinExpr::var(x).plus(-2.0));
        b.add_objective(x, 1.0);
        let s = solve(&b.build().unwrap(), &SolverSettings::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn perturbed_point_fails_verify() {
        let mut b = ProgramBuilder::new();
        let x = b.free_var();
        let y = b.free_var();
        b.add_eq(LinExpr::var(x).term(y, 1.0).plus(-2.0));
        b.add_ge(LinExpr::var(x));
        b.add_ge(LinExpr::var(y));
        b.add_objective(x, 1.0);
        let p = b.build().unwrap();
        let mut s = solve_ok(&p);
        s.primal[0] += 1.0;
        assert!(!verify(&p, &s.primal, 1e-6).pass);
    }

    #[test]
    fn negative_psd_eigenvalue_names_block() {
        let mut b = ProgramBuilder::new();
        let x = b.free_var();
        b.add_psd(1, vec![LinExpr::constant(1.0)]);
        b.add_psd(2, vec![LinExpr::var(x), LinExpr::constant(0.0), LinExpr::constant(1.0)]);
        let p = b.build().unwrap();
        let r = verify(&p, &[-1e-3], 1e-6);
        assert!(!r.pass);
        assert_eq!(r.worst_psd_block, Some(1));
        assert!((r.min_psd_eigenvalue + 1e-3).abs() < 1e-12);
    }

    #[test]
    fn duplicate_row_keeps_objective() {
        let build = |dup: bool| {
            let mut b = ProgramBuilder::new();
            let x = b.free_var();
            let y = b.free_var();
            b.add_le(LinExpr::var(x).term(y, 2.0).plus(-4.0));
            if dup {
                b.add_le(LinExpr::var(x).term(y, 2.0).plus(-4.0));
            }
            b.add_soc_affine(vec![LinExpr::constant(3.0), LinExpr::var(x), LinExpr::var(y)]);
            b.add_objective(x, -1.0);
            b.add_objective(y, -1.0);
            b.build().unwrap()
        };
        let a = solve_ok(&build(false)).objective;
        let b = solve_ok(&build(true)).objective;
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn validate_rejects_short_soc() {
        let mut b = ProgramBuilder::new();
        let x = b.free_var();
        b.add_soc(vec![x]);
        assert!(matches!(b.build(), Err(Error::InvalidProgram(_))));
    }

    #[test]
    fn dump_load_roundtrip() {
        let mut b = ProgramBuilder::new();
        let x = b.add_var(0.0, 5.0);
        let y = b.free_var();
        b.add_eq(LinExpr::var(x).term(y, -1.0).plus(0.5));
        b.add_le(LinExpr::var(y).plus(-2.0));
        b.add_soc(vec![x, y]);
        b.add_psd(2, vec![LinExpr::var(x), LinExpr::constant(0.25), LinExpr::var(y).plus(1.0)]);
        b.add_objective(x, 1.5);
        b.add_objective_constant(2.0);
        let p = b.build().unwrap();
        let q = load_program(&dump_program(&p)).unwrap();
        assert_eq!(p, q);
    }
}
