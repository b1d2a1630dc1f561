use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Bundled 14-bus case, δ = 10000, 2 %/min ramps, 5000 scenarios, 33-point δ schedule.
    Paper,
}

/// Options shared by every subcommand. Flags override the `--config` file,
/// which overrides the preset, which overrides built-in defaults.
#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Opts {
    /// TOML file with any of these options (kebab-case keys).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Case file, or `case14` / `case2` for a bundled fixture.
    #[arg(long)]
    pub case: Option<String>,
    /// Renewable forecast table (T rows, one column per renewable).
    #[arg(long)]
    pub forecast: Option<PathBuf>,
    /// Moment table (k,period,mean,std); overrides calibration.
    #[arg(long)]
    pub ambiguity: Option<PathBuf>,
    /// Forecast-error history, one block of T rows per day.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Fraction of history days used for calibration [default: 0.5].
    #[arg(long)]
    pub split: Option<f64>,
    /// Multiplies every load.
    #[arg(long)]
    pub load_scale: Option<f64>,
    /// Ramp limit as a fraction of p_max per minute.
    #[arg(long)]
    pub ramp_scale: Option<f64>,

    /// Utilization weight, $ [default: 10000].
    #[arg(long)]
    pub delta: Option<f64>,
    /// Utilization floor [default: 0.7].
    #[arg(long)]
    pub u0: Option<f64>,
    /// Weight on expected over-estimation cost.
    #[arg(long)]
    pub delta_plus: Option<f64>,
    /// Weight on expected under-estimation cost.
    #[arg(long)]
    pub delta_minus: Option<f64>,
    /// CPLA segment count [default: 16].
    #[arg(long)]
    pub segments: Option<usize>,

    /// Out-of-sample scenario count [default: 5000].
    #[arg(long)]
    pub scenarios: Option<usize>,
    /// Scenario seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// $/MW of load shed [default: 2000].
    #[arg(long)]
    pub shed_price: Option<f64>,
    /// $/MW of curtailment [default: 100].
    #[arg(long)]
    pub curtail_price: Option<f64>,

    /// sweep: δ values, comma separated [default: 33-point schedule].
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub deltas: Option<Vec<f64>>,
    /// evaluate: solution file to score instead of solving.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    /// jtau: τ values [default: 0 0.25 0.5 1 2].
    #[arg(long, num_args = 1..)]
    pub tau: Option<Vec<f64>>,
    /// jtau: oracle grid points [default: 2001].
    #[arg(long)]
    pub grid: Option<usize>,
    /// jtau: oracle grid half-width [default: 10].
    #[arg(long)]
    pub grid_halfwidth: Option<f64>,
    /// jtau: CPLA range upper end [default: 5].
    #[arg(long)]
    pub tau_max: Option<f64>,
}

macro_rules! fill {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Opts {
    /// Fills unset fields from `other`.
    pub fn or(mut self, other: &Opts) -> Opts {
        fill!(self, other; preset, case, forecast, ambiguity, history, split, load_scale, ramp_scale,
            delta, u0, delta_plus, delta_minus, segments, scenarios, seed, shed_price, curtail_price,
            deltas, solution, tau, grid, grid_halfwidth, tau_max);
        self
    }

    /// Flags over config file over preset.
    pub fn resolve(self) -> anyhow::Result<Opts> {
        let mut merged = self.clone();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Opts = toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
            merged = merged.or(&file);
        }
        if merged.preset == Some(Preset::Paper) {
            let preset = Opts {
                case: Some("case14".into()),
                delta: Some(10_000.0),
                u0: Some(0.7),
                ramp_scale: Some(0.02),
                scenarios: Some(5000),
                deltas: Some(dne_core::frontier::reference_schedule()),
                ..Opts::default()
            };
            merged = merged.or(&preset);
        }
        Ok(merged)
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().unwrap_or(Path::new("out"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    /// SHA-256 of the command name and the merged options.
    pub fn hash(&self, command: &str) -> String {
        let body = toml::to_string(self).expect("options serialize");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        h.update(body.as_bytes());
        hex::encode(h.finalize())
    }
}

/// A usage problem detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
