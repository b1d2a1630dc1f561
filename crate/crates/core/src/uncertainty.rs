//! Moment ambiguity sets, Gaussian test scenarios and the Gauss-inequality
//! coverage bound with an LP cross-check.

use std::fmt::Write as _;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{GridCase, SeriesBlock, SeriesTable};

/// Per-(k,t) mean and standard deviation of the forecast error, MW.
/// Indexed `[k][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguitySet {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl AmbiguitySet {
    pub fn new(mean: Vec<Vec<f64>>, std: Vec<Vec<f64>>) -> Result<Self> {
        if mean.len() != std.len() || mean.iter().zip(&std).any(|(m, s)| m.len() != s.len()) {
            return Err(Error::invariant("ambiguity", "mean and std shapes differ"));
        }
        for (k, row) in std.iter().enumerate() {
            if let Some(t) = row.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::invariant(format!("ambiguity.std[{k}][{t}]"), "sigma must be positive"));
            }
        }
        if mean.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::invariant("ambiguity.mean", "mean must be finite"));
        }
        Ok(Self { mean, std })
    }

    /// Zero mean, σ_kt = w_max,k × (10% + 0.1%·(t−1)).
    pub fn preset(case: &GridCase) -> Result<Self> {
        let t = case.periods();
        let mean = vec![vec![0.0; t]; case.renewables.len()];
        let std = case.renewables.iter().map(|w| preset_sigmas(w.w_max, t)).collect();
        Self::new(mean, std)
    }

    pub fn renewables(&self) -> usize {
        self.mean.len()
    }

    pub fn periods(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }

    pub fn check_shape(&self, case: &GridCase) -> Result<()> {
        if self.renewables() != case.renewables.len()
            || (self.renewables() > 0 && self.periods() != case.periods())
        {
            return Err(Error::invariant(
                "ambiguity",
                format!(
                    "shape {}×{} does not match case K={} T={}",
                    self.renewables(),
                    self.periods(),
                    case.renewables.len(),
                    case.periods()
                ),
            ));
        }
        Ok(())
    }

    /// Multiplies means and deviations by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        let f = |v: &Vec<Vec<f64>>| v.iter().map(|r| r.iter().map(|x| x * alpha).collect()).collect();
        Self::new(f(&self.mean), f(&self.std))
    }

    /// `renewable,period,mean,std` with 1-based indices.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("renewable,period,mean,std\n");
        for k in 0..self.renewables() {
            for t in 0..self.periods() {
                let _ = writeln!(s, "{},{},{},{}", k + 1, t + 1, self.mean[k][t], self.std[k][t]);
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Series(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Series(format!("ambiguity table lacks a `{name}` column")))
        };
        let (ck, ct, cm, cs) = (col("renewable")?, col("period")?, col("mean")?, col("std")?);
        let mut entries = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Series(format!("row {}: {e}", i + 2)))?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Series(format!("row {}: non-numeric cell", i + 2)))
            };
            let (k, t) = (num(ck)? as usize, num(ct)? as usize);
            if k == 0 || t == 0 {
                return Err(Error::Series(format!("row {}: indices are 1-based", i + 2)));
            }
            entries.push((k - 1, t - 1, num(cm)?, num(cs)?));
        }
        let kk = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let tt = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        let mut mean = vec![vec![f64::NAN; tt]; kk];
        let mut std = vec![vec![f64::NAN; tt]; kk];
        for (k, t, m, s) in entries {
            mean[k][t] = m;
            std[k][t] = s;
        }
        if mean.iter().flatten().any(|m| m.is_nan()) {
            return Err(Error::Series("ambiguity table does not cover every (renewable, period)".into()));
        }
        Self::new(mean, std)
    }
}

/// σ_t = capacity × (0.1 + 0.001·(t−1)) for t = 1..=periods.
pub fn preset_sigmas(capacity: f64, periods: usize) -> Vec<f64> {
    (0..periods).map(|t| capacity * (0.1 + 0.001 * t as f64)).collect()
}

/// Sample mean and standard deviation (divisor n−1) for every (k,t).
///
/// `history` holds one `T × K` block per historical day.
pub fn calibrate(history: &[SeriesBlock]) -> Result<AmbiguitySet> {
    let n = history.len();
    if n < 2 {
        return Err(Error::Series(format!("calibration needs at least 2 samples per (k,t), got {n}")));
    }
    let periods = history[0].len();
    let k_count = history[0].first().map_or(0, Vec::len);
    if history.iter().any(|b| b.len() != periods || b.iter().any(|r| r.len() != k_count)) {
        return Err(Error::Series("history blocks differ in shape".into()));
    }
    let mut mean = vec![vec![0.0; periods]; k_count];
    let mut std = vec![vec![0.0; periods]; k_count];
    for k in 0..k_count {
        for t in 0..periods {
            let xs = history.iter().map(|b| b[t][k]);
            let m = xs.clone().sum::<f64>() / n as f64;
            let var = xs.map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
            if !(var > 0.0) {
                return Err(Error::invariant(
                    format!("history[{k}][{t}]"),
                    "zero sample variance; sigma must be positive",
                ));
            }
            mean[k][t] = m;
            std[k][t] = var.sqrt();
        }
    }
    AmbiguitySet::new(mean, std)
}

/// Splits history blocks into a calibration part (the leading `fraction`) and a test part.
pub fn split_history(history: &[SeriesBlock], fraction: f64) -> Result<(Vec<SeriesBlock>, Vec<SeriesBlock>)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let cut = ((history.len() as f64) * fraction).round() as usize;
    let cut = cut.clamp(1, history.len().saturating_sub(1).max(1));
    Ok((history[..cut].to_vec(), history[cut..].to_vec()))
}

/// Realizations of ε, each indexed `[k][t]` in MW.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub scenarios: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    pub descriptor: String,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        let k = self.scenarios.first().map_or(0, Vec::len);
        let t = self.scenarios.first().and_then(|s| s.first()).map_or(0, Vec::len);
        (k, t)
    }

    /// Series-table form: one `T × K` block per scenario.
    pub fn to_table(&self) -> SeriesTable {
        let (k, t) = self.shape();
        SeriesTable {
            columns: (1..=k).map(|i| format!("w{i}")).collect(),
            blocks: self
                .scenarios
                .iter()
                .map(|s| (0..t).map(|tt| (0..k).map(|kk| s[kk][tt]).collect()).collect())
                .collect(),
        }
    }

    pub fn from_table(table: &SeriesTable, seed: u64, descriptor: impl Into<String>) -> Self {
        let scenarios = table
            .blocks
            .iter()
            .map(|b| {
                let k = b.first().map_or(0, Vec::len);
                (0..k).map(|kk| b.iter().map(|row| row[kk]).collect()).collect()
            })
            .collect();
        ScenarioSet { scenarios, seed, descriptor: descriptor.into() }
    }
}

/// Draws `n` independent Gaussian realizations with the given moments using
/// a ChaCha8 stream seeded from `seed`.
pub fn sample_gaussian(ambiguity: &AmbiguitySet, n: usize, seed: u64) -> Result<ScenarioSet> {
    if n == 0 {
        return Err(Error::Config("scenario count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenarios = (0..n)
        .map(|_| {
            ambiguity
                .mean
                .iter()
                .zip(&ambiguity.std)
                .map(|(ms, ss)| {
                    ms.iter()
                        .zip(ss)
                        .map(|(m, s)| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + s * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ScenarioSet { scenarios, seed, descriptor: format!("gaussian-chacha8 n={n}") })
}

/// Smallest half-width (σ units) for which the Gauss bound applies.
pub fn gauss_threshold() -> f64 {
    2.0 / 3f64.sqrt()
}

/// Worst-case coverage `inf_D P(|ε−μ| ≤ λσ) = 1 − 4/(9λ²)` for unimodal laws.
pub fn gauss_worst_coverage(lambda: f64) -> Result<f64> {
    if !(lambda >= gauss_threshold() - 1e-12) {
        return Err(Error::OutOfRegime(format!(
            "lambda = {lambda} is below 2/sqrt(3); the Gauss bound does not apply"
        )));
    }
    Ok(1.0 - 4.0 / (9.0 * lambda * lambda))
}

/// Half-width in σ units whose worst-case miss probability equals `s`.
pub fn gauss_half_width(s: f64) -> f64 {
    2.0 / (3.0 * s.sqrt())
}

/// `n` equally spaced points on `[-halfwidth, halfwidth]`.
pub fn symmetric_grid(halfwidth: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| -halfwidth + 2.0 * halfwidth * j as f64 / (n - 1) as f64).collect()
}

/// LP upper bound on the worst-case coverage over unimodal unit-variance laws.
///
/// Unimodal laws about 0 are mixtures `ε = Uζ` with `U ~ Uniform(0,1)`
/// independent of ζ. With ζ restricted to a grid, `E[ζ] = 0` and
/// `E[ζ²] = 3` (so that `Var ε = 1`), the LP minimizes
/// `Σ p_j P(|U ζ_j| ≤ λ) = Σ p_j min(1, λ/|ζ_j|)`.
pub fn worst_coverage_oracle(lambda: f64, grid_halfwidth: f64, grid_points: usize) -> Result<f64> {
    if grid_points < 201 {
        return Err(Error::Oracle(format!("grid needs at least 201 points, got {grid_points}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::Oracle("lambda must be positive".into()));
    }
    let grid = symmetric_grid(grid_halfwidth, grid_points);
    let coverage = |z: f64| if z.abs() <= lambda { 1.0 } else { lambda / z.abs() };
    let value = moment_lp(&grid, coverage, 3.0, OptimizationDirection::Minimize)?;
    Ok(value.min(1.0))
}

/// Optimizes `Σ p_j h(ζ_j)` over probability vectors on `grid` with
/// `Σ p ζ = 0` and `Σ p ζ² = second_moment`.
pub(crate) fn moment_lp(
    grid: &[f64],
    h: impl Fn(f64) -> f64,
    second_moment: f64,
    direction: OptimizationDirection,
) -> Result<f64> {
    let mut lp = Problem::new(direction);
    let vars: Vec<_> = grid.iter().map(|&z| lp.add_var(h(z), (0.0, f64::INFINITY))).collect();
    let row = |f: &dyn Fn(f64) -> f64| -> Vec<(minilp::Variable, f64)> {
        vars.iter().zip(grid).map(|(&v, &z)| (v, f(z))).filter(|(_, c)| *c != 0.0).collect()
    };
    lp.add_constraint(row(&|_| 1.0).as_slice(), ComparisonOp::Eq, 1.0);
    lp.add_constraint(row(&|z| z).as_slice(), ComparisonOp::Eq, 0.0);
    lp.add_constraint(row(&|z| z * z).as_slice(), ComparisonOp::Eq, second_moment);
    match lp.solve() {
        Ok(sol) => Ok(sol.objective()),
        Err(minilp::Error::Infeasible) => Err(Error::Oracle(
            "moment system is infeasible on this grid (widen the grid)".into(),
        )),
        Err(e) => Err(Error::Oracle(e.to_string())),
    }
}
