//! Worst-case expected shortfall `J(τ)` over unimodal laws, the separable
//! aggregate `g`, the P± risk terms, and their conservative piecewise-linear
//! approximation inside the co-optimization model.
//!
//! `J(τ)` is the value of
//!
//! ```text
//! min π₁ + π₃ + 1
//! s.t. ‖(π₂, π₁ − π₃ + 1)‖ ≤ π₁ + π₃ + 1
//!      Λ ∈ S⁴₊, Λ₀₀ = τ,
//!      Σ_{i+j=m} Λ_ij = 0 for m = 1, 3, 5,
//!      Σ_{i+j=2ℓ} Λ_ij = π_ℓ for ℓ = 1, 2, 3.
//! ```
//!
//! Λ is indexed 0..3 by monomial degree, so `Σ_{i+j=m} Λ_ij` is the
//! coefficient of `ζ^m` in `(1, ζ, ζ², ζ³) Λ (1, ζ, ζ², ζ³)ᵀ`; the PSD block
//! certifies `τ + π₁x + π₂x² + π₃x³ ≥ 0` on `x = ζ² ≥ 0`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{OnceLock, RwLock};

use minilp::OptimizationDirection;

use crate::conic::{ClarabelBackend, ConicBackend, ConicProgram, LinExpr, ProgramBuilder, PsdCone, Solution, SolverSettings, Var};
use crate::drco::{DrcoModel, ExtensionConfig};
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::uncertainty::{moment_lp, AmbiguitySet};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Assembles the `J(τ)` program.
pub fn j_tau_program(tau: f64) -> Result<ConicProgram> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be finite and nonnegative, got {tau}")));
    }
    let mut b = ProgramBuilder::new();
    let pi: Vec<Var> = (0..3).map(|_| b.free_var()).collect();
    // Upper triangle, column-major.
    let lam: Vec<Var> = (0..10).map(|_| b.free_var()).collect();
    let at = |r: usize, c: usize| {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        lam[PsdCone::triangle_index(r, c)]
    };
    b.add_objective(pi[0], 1.0);
    b.add_objective(pi[2], 1.0);
    b.add_objective_constant(1.0);
    b.add_soc_affine(vec![
        LinExpr::var(pi[0]).term(pi[2], 1.0).plus(1.0),
        LinExpr::var(pi[1]),
        LinExpr::var(pi[0]).term(pi[2], -1.0).plus(1.0),
    ]);
    b.fix(at(0, 0), tau);
    for m in 1..=6 {
        let mut row = LinExpr::new();
        for i in 0..4 {
            if m >= i && m - i < 4 {
                row.push(at(i, m - i), 1.0);
            }
        }
        if m % 2 == 0 {
            row.push(pi[m / 2 - 1], -1.0);
        }
        b.add_eq(row);
    }
    b.add_psd(4, lam.iter().map(|&v| LinExpr::var(v)).collect());
    b.build()
}

/// Settings used for `J(τ)` solves.
pub fn j_tau_settings() -> SolverSettings {
    SolverSettings { tol_feas: 1e-10, tol_gap_abs: 1e-10, tol_gap_rel: 1e-10, ..SolverSettings::default() }
}

/// Solves the `J(τ)` program with an explicit backend.
pub fn j_tau_with(backend: &dyn ConicBackend, tau: f64, settings: &SolverSettings) -> Result<(f64, ConicProgram, Solution)> {
    if !backend.capabilities().psd {
        return Err(Error::Capability(format!(
            "J(tau) needs PSD cones; backend `{}` is SOC-only",
            backend.name()
        )));
    }
    let program = j_tau_program(tau)?;
    let sol = backend.solve(&program, settings)?;
    if !sol.is_optimal() {
        return Err(Error::Solve { status: sol.status, diagnostics: sol.diagnostics });
    }
    Ok((sol.objective, program, sol))
}

fn cache() -> &'static RwLock<HashMap<i64, f64>> {
    static CACHE: OnceLock<RwLock<HashMap<i64, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

fn cache_key(tau: f64) -> i64 {
    (tau * 1e12).round() as i64
}

/// `J(τ)` with the default backend, cached by τ rounded to 1e−12.
pub fn j_tau(tau: f64) -> Result<f64> {
    let key = cache_key(tau);
    if let Some(v) = cache().read().expect("cache lock").get(&key) {
        return Ok(*v);
    }
    let (v, _, _) = j_tau_with(&ClarabelBackend::new(), tau, &j_tau_settings())?;
    cache().write().expect("cache lock").insert(key, v);
    Ok(v)
}

/// Evaluates `J` at many points, solving distinct uncached values with `exec`.
pub fn j_tau_many(taus: &[f64], exec: Execution) -> Result<Vec<f64>> {
    let mut missing: Vec<f64> = {
        let c = cache().read().expect("cache lock");
        taus.iter().copied().filter(|t| !c.contains_key(&cache_key(*t))).collect()
    };
    missing.sort_by(f64::total_cmp);
    missing.dedup_by_key(|t| cache_key(*t));
    let solved = exec.map(missing.len(), |j| j_tau(missing[j]));
    for r in solved {
        r?;
    }
    taus.iter().map(|&t| j_tau(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HVariant {
    /// `[1 − τ/ζ]⁺` for ζ > 0.
    Ratio,
    /// `(ζ − τ)²/(2ζ)` for ζ > τ, i.e. `E_U[Uζ − τ]⁺`.
    Exact,
}

impl HVariant {
    pub fn eval(self, tau: f64, zeta: f64) -> f64 {
        match self {
            HVariant::Ratio if zeta > 0.0 => (1.0 - tau / zeta).max(0.0),
            HVariant::Exact if zeta > tau => (zeta - tau).powi(2) / (2.0 * zeta),
            _ => 0.0,
        }
    }
}

/// LP lower bound on `sup E[h(ζ)]` over laws on `grid` with mean 0 and variance 1.
pub fn j_tau_oracle(tau: f64, variant: HVariant, grid: &[f64]) -> Result<f64> {
    if grid.len() < 201 {
        return Err(Error::Oracle(format!("grid needs at least 201 points, got {}", grid.len())));
    }
    if !(tau >= 0.0) {
        return Err(Error::Oracle("tau must be nonnegative".into()));
    }
    moment_lp(grid, |z| variant.eval(tau, z), 1.0, OptimizationDirection::Maximize)
}

/// One `(c, σ, τ)` block of the separable aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GBlock {
    pub c: f64,
    pub sigma: f64,
    pub tau: f64,
}

/// `√3 Σ c σ J(τ)`.
pub fn g(blocks: &[GBlock]) -> Result<f64> {
    let mut total = 0.0;
    for b in blocks {
        if !(b.c >= 0.0) {
            return Err(Error::Config("cost coefficients must be nonnegative".into()));
        }
        if b.c == 0.0 {
            continue;
        }
        total += SQRT3 * b.c * b.sigma * j_tau(b.tau)?;
    }
    Ok(total)
}

fn coefficient(c: Option<&Vec<Vec<f64>>>, k: usize, t: usize) -> f64 {
    c.map_or(1.0, |m| m[k][t])
}

fn tau_blocks(
    ambiguity: &AmbiguitySet,
    c: Option<&Vec<Vec<f64>>>,
    offset: impl Fn(usize, usize) -> f64,
) -> Result<Vec<GBlock>> {
    let mut out = Vec::new();
    for k in 0..ambiguity.renewables() {
        for t in 0..ambiguity.periods() {
            let sigma = ambiguity.std[k][t];
            let tau = offset(k, t) / (SQRT3 * sigma);
            if tau < -1e-9 {
                return Err(Error::invariant(
                    format!("tau[{k}][{t}]"),
                    format!("negative threshold {tau}: DNE limits do not contain the mean"),
                ));
            }
            out.push(GBlock { c: coefficient(c, k, t), sigma, tau: tau.max(0.0) });
        }
    }
    Ok(out)
}

/// Worst-case expected overestimation cost for lower limits `eps_l[k][t]`.
pub fn p_plus(ambiguity: &AmbiguitySet, eps_l: &[Vec<f64>], c_plus: Option<&Vec<Vec<f64>>>) -> Result<f64> {
    g(&tau_blocks(ambiguity, c_plus, |k, t| ambiguity.mean[k][t] - eps_l[k][t])?)
}

/// Worst-case expected underestimation cost for upper limits `eps_u[k][t]`.
pub fn p_minus(ambiguity: &AmbiguitySet, eps_u: &[Vec<f64>], c_minus: Option<&Vec<Vec<f64>>>) -> Result<f64> {
    g(&tau_blocks(ambiguity, c_minus, |k, t| eps_u[k][t] - ambiguity.mean[k][t])?)
}

/// Chord interpolation of `J` on `H + 1` equally spaced breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpla {
    pub tau_l: f64,
    pub tau_u: f64,
    pub segments: usize,
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl Cpla {
    /// `min Σ λ_h J(n_h)` s.t. `Σ λ_h n_h = τ`, `Σ λ_h = 1`, `λ ≥ 0`; for convex
    /// `J` this is the linear interpolant between neighbouring breakpoints.
    pub fn value(&self, tau: f64) -> Result<f64> {
        let span = self.tau_u - self.tau_l;
        if tau < self.tau_l - 1e-12 * span.max(1.0) || tau > self.tau_u + 1e-12 * span.max(1.0) {
            return Err(Error::Config(format!("tau {tau} outside [{}, {}]", self.tau_l, self.tau_u)));
        }
        let x = ((tau - self.tau_l) / span * self.segments as f64).clamp(0.0, self.segments as f64);
        let h = (x.floor() as usize).min(self.segments - 1);
        let w = x - h as f64;
        Ok((1.0 - w) * self.values[h] + w * self.values[h + 1])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("h,n_h,J\n");
        for (h, (n, j)) in self.breakpoints.iter().zip(&self.values).enumerate() {
            let _ = writeln!(s, "{},{n},{j}", h + 1);
        }
        s
    }
}

/// Breakpoints `n_h = τ_L + (h−1)(τ_U − τ_L)/H`, `h = 1..=H+1`.
pub fn breakpoints(tau_l: f64, tau_u: f64, segments: usize) -> Vec<f64> {
    (0..=segments)
        .map(|h| {
            if h == segments {
                tau_u
            } else {
                tau_l + h as f64 * (tau_u - tau_l) / segments as f64
            }
        })
        .collect()
}

pub fn build_cpla(tau_l: f64, tau_u: f64, segments: usize) -> Result<Cpla> {
    if segments == 0 {
        return Err(Error::Config("CPLA segment count H must be at least 1".into()));
    }
    if !(tau_l < tau_u) {
        return Err(Error::Config(format!("CPLA needs tau_L < tau_U, got [{tau_l}, {tau_u}]")));
    }
    if tau_l < 0.0 {
        return Err(Error::Config(format!("CPLA lower endpoint {tau_l} is negative")));
    }
    let bp = breakpoints(tau_l, tau_u, segments);
    let values = j_tau_many(&bp, Execution::default())?;
    Ok(Cpla { tau_l, tau_u, segments, breakpoints: bp, values })
}

/// Handles to the CPLA terms appended to a model.
#[derive(Debug, Clone, Default)]
pub struct ExtensionVars {
    /// `δ⁺ ×` CPLA bound on P⁺ as an affine expression.
    pub plus: LinExpr,
    pub minus: LinExpr,
    /// Per (k,t) tables: `(k, t, side, Cpla)`, side `+1` for P⁺.
    pub tables: Vec<(usize, usize, i8, Cpla)>,
}

impl ExtensionVars {
    pub fn terms(&self, sol: &Solution) -> (f64, f64) {
        (self.plus.eval(&sol.primal), self.minus.eval(&sol.primal))
    }
}

/// Appends `δ⁺ P⁺ + δ⁻ P⁻`, with P± replaced by their CPLA upper bounds.
///
/// Ranges follow the DNE bounds: P⁺ uses `[μ, μ + ŵ − w_min]/(√3σ)` and P⁻
/// uses `[−μ, w_max − ŵ − μ]/(√3σ)`, with lower endpoints clamped at 0
/// since `J` is only defined for `τ ≥ 0`. A degenerate range collapses to
/// the constant `J(τ_L)`.
pub fn extend_drco(model: &mut DrcoModel<'_>, ext: &ExtensionConfig) -> Result<ExtensionVars> {
    let case = model.case;
    let amb = model.ambiguity;
    let (nk, nt) = (case.renewables.len(), case.periods());

    struct Job {
        k: usize,
        t: usize,
        side: i8,
        weight: f64,
        lo: f64,
        hi: f64,
    }
    let mut jobs = Vec::new();
    for k in 0..nk {
        let w = &case.renewables[k];
        for t in 0..nt {
            let (mu, sigma) = (amb.mean[k][t], amb.std[k][t]);
            let scale = SQRT3 * sigma;
            let cp = coefficient(ext.c_plus.as_ref(), k, t) * ext.delta_plus;
            if cp > 0.0 {
                let hi = (mu + w.forecast[t] - w.w_min) / scale;
                jobs.push(Job { k, t, side: 1, weight: cp, lo: (mu / scale).max(0.0), hi });
            }
            let cm = coefficient(ext.c_minus.as_ref(), k, t) * ext.delta_minus;
            if cm > 0.0 {
                let hi = (w.w_max - w.forecast[t] - mu) / scale;
                jobs.push(Job { k, t, side: -1, weight: cm, lo: (-mu / scale).max(0.0), hi });
            }
        }
    }

    let all: Vec<f64> = jobs
        .iter()
        .flat_map(|j| if j.hi > j.lo { breakpoints(j.lo, j.hi, ext.segments) } else { vec![j.lo] })
        .collect();
    j_tau_many(&all, Execution::default())?;

    let mut out = ExtensionVars::default();
    for job in jobs {
        let sigma = amb.std[job.k][job.t];
        let mu = amb.mean[job.k][job.t];
        let factor = job.weight * SQRT3 * sigma;
        let term = if job.side > 0 { &mut out.plus } else { &mut out.minus };
        if !(job.hi > job.lo + 1e-12) {
            let v = factor * j_tau(job.lo)?;
            term.constant += v;
            model.builder.add_objective_constant(v);
            continue;
        }
        let cpla = build_cpla(job.lo, job.hi, ext.segments)?;
        let lambdas: Vec<Var> = (0..=ext.segments).map(|_| model.builder.nonneg_var()).collect();
        let mut convex = LinExpr::constant(-1.0);
        // Σ λ n_h = τ(ε), written as √3σ Σ λ n_h = ±(ε − μ).
        let mut tau_row = if job.side > 0 {
            LinExpr::var(model.map.eps_l[job.k][job.t]).plus(-mu)
        } else {
            LinExpr::new().term(model.map.eps_u[job.k][job.t], -1.0).plus(mu)
        };
        for (h, &l) in lambdas.iter().enumerate() {
            convex.push(l, 1.0);
            tau_row.push(l, SQRT3 * sigma * cpla.breakpoints[h]);
            let c = factor * cpla.values[h];
            model.builder.add_objective(l, c);
            term.push(l, c);
        }
        model.builder.add_eq(convex);
        model.builder.add_eq(tau_row);
        out.tables.push((job.k, job.t, job.side, cpla));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::symmetric_grid;

    #[test]
    fn j_at_zero_is_one() {
        assert!((j_tau(0.0).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn j_decays() {
        let a = j_tau(1e3).unwrap();
        let b = j_tau(2e3).unwrap();
        assert!(a <= 1e-3, "J(1000) = {a}");
        assert!(b <= a + 1e-9);
    }

    #[test]
    fn j_is_convex_at_half() {
        let (a, m, c) = (j_tau(0.25).unwrap(), j_tau(0.5).unwrap(), j_tau(0.75).unwrap());
        assert!(m <= (a + c) / 2.0 + 1e-8);
    }

    #[test]
    fn psd_certificate_verifies() {
        let (_, program, sol) = j_tau_with(&ClarabelBackend::new(), 0.5, &j_tau_settings()).unwrap();
        let report = crate::conic::verify(&program, &sol.primal, 1e-6);
        assert!(report.pass, "{}", report.summary());
        assert!(report.min_psd_eigenvalue >= -1e-6);
    }

    #[test]
    fn soc_only_backend_refused() {
        let err = j_tau_with(&ClarabelBackend::soc_only(), 0.5, &j_tau_settings()).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn negative_tau_rejected() {
        assert!(j_tau(-0.1).is_err());
    }

    #[test]
    fn exact_oracle_symmetric_law() {
        let grid = symmetric_grid(10.0, 2001);
        let v = j_tau_oracle(0.0, HVariant::Exact, &grid).unwrap();
        assert!(v >= 0.25 - 1e-9, "{v}");
    }

    #[test]
    fn g_reductions() {
        let one = GBlock { c: 1.0, sigma: 1.0 / SQRT3, tau: 0.0 };
        assert!((g(&[one]).unwrap() - j_tau(0.0).unwrap()).abs() < 1e-12);
        assert_eq!(g(&[GBlock { c: 0.0, ..one }]).unwrap(), 0.0);
        let b = GBlock { c: 2.0, sigma: 3.0, tau: 0.4 };
        assert!((g(&[b, b]).unwrap() - 2.0 * g(&[b]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cpla_exact_at_breakpoints() {
        let c = build_cpla(0.0, 2.0, 4).unwrap();
        for (n, v) in c.breakpoints.iter().zip(&c.values) {
            assert!((c.value(*n).unwrap() - v).abs() < 1e-12);
        }
        assert!(build_cpla(1.0, 1.0, 4).is_err());
        assert!(build_cpla(0.0, 1.0, 0).is_err());
    }
}
