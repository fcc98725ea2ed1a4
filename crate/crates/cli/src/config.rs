//! Run options from flags and an optional JSON config file. Flags win.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use eecal_core::{Method, NuMode, RiskKind, RiskTarget, TraceFormat};

pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_GRID_STEP: f64 = 0.01;
pub const DEFAULT_CAL_FRACTION: f64 = 0.8;
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

/// Epsilon list: comma-separated values or `start:stop:step` ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Epsilons(pub Vec<f64>);

impl FromStr for Epsilons {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let nums: Vec<f64> = part
                .split(':')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| format!("bad epsilon {x:?}: {e}"))
                })
                .collect::<Result<_, _>>()?;
            match nums[..] {
                [v] => out.push(v),
                [start, stop, step] if step > 0.0 => {
                    let count = ((stop - start) / step + 1e-9).floor() as i64;
                    // rounded to 12 digits so 0.1 * 3 prints as 0.3
                    out.extend((0..=count).map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12));
                }
                _ => return Err(format!("bad epsilon range {part:?}")),
            }
        }
        if out.is_empty() {
            return Err("empty epsilon list".into());
        }
        Ok(Epsilons(out))
    }
}

impl fmt::Display for Epsilons {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(f64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum EpsilonValue {
    One(f64),
    Many(Vec<f64>),
    Text(String),
}

/// Options shared by every command; every field may also come from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file with any of the options below (flags override it)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trace file (.jsonl or .csv)
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Synthetic generator config (JSON) used instead of --traces
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Trace format; inferred from the extension by default
    #[arg(long)]
    pub format: Option<TraceFormat>,
    /// gap | consistency
    #[arg(long)]
    pub risk: Option<RiskKind>,
    /// prediction | distribution
    #[arg(long)]
    pub target: Option<RiskTarget>,
    /// Precomputed per-exit loss to use for prediction risks
    #[arg(long)]
    pub loss: Option<String>,
    /// Clip relative losses at zero
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub clip: Option<bool>,
    /// Loss bound B (default 1 for prediction, 2 for distribution)
    #[arg(long)]
    pub bound: Option<f64>,
    /// emp | crc | ucb | ltt
    #[arg(long)]
    pub method: Option<Method>,
    /// Risk tolerance, or a list for `curve`
    #[arg(long)]
    pub epsilon: Option<Epsilons>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Threshold grid step
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Share of samples used for calibration in each trial
    #[arg(long)]
    pub cal_fraction: Option<f64>,
    /// Number of trials
    #[arg(long = "S", visible_alias = "trials")]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// half_over_b | one_over_b
    #[arg(long)]
    pub nu_mode: Option<NuMode>,
    /// Threshold to evaluate
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Calibration result JSON to read the threshold from
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Cumulative per-exit costs, comma-separated
    #[arg(long, value_delimiter = ',')]
    pub cost_weights: Option<Vec<f64>>,
    /// Output path; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub output_format: Option<OutputFormat>,
    /// Extra JSON summary for `trials`
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    command: Option<String>,
    traces: Option<PathBuf>,
    synth: Option<PathBuf>,
    format: Option<String>,
    risk: Option<String>,
    target: Option<String>,
    loss: Option<String>,
    clip: Option<bool>,
    bound: Option<f64>,
    method: Option<String>,
    epsilon: Option<EpsilonValue>,
    delta: Option<f64>,
    grid_step: Option<f64>,
    cal_fraction: Option<f64>,
    #[serde(rename = "S", alias = "trials")]
    trials: Option<usize>,
    seed: Option<u64>,
    nu_mode: Option<String>,
    lambda: Option<f64>,
    calibration: Option<PathBuf>,
    cost_weights: Option<Vec<f64>>,
    out: Option<PathBuf>,
    output_format: Option<OutputFormat>,
    summary: Option<PathBuf>,
}

fn parse<T: FromStr>(field: &str, v: Option<String>) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    v.map(|s| {
        s.parse::<T>()
            .map_err(|e| anyhow::anyhow!("config field {field}: {e}"))
    })
    .transpose()
}

/// Relative paths in a config file resolve against the file's directory.
fn rebase(base: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_relative() { base.join(p) } else { p })
}

impl RunArgs {
    /// Fills unset flags from `--config`. A `command` key in the file must match.
    pub fn resolve(mut self, command: &str) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text =
            std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
        let file: FileConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(c) = &file.command {
            if c != command {
                bail!("config {} is for command {c:?}, not {command:?}", path.display());
            }
        }
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let epsilon = match file.epsilon {
            None => None,
            Some(EpsilonValue::One(v)) => Some(Epsilons(vec![v])),
            Some(EpsilonValue::Many(v)) if !v.is_empty() => Some(Epsilons(v)),
            Some(EpsilonValue::Many(_)) => bail!("config field epsilon: empty list"),
            Some(EpsilonValue::Text(s)) => Some(
                s.parse()
                    .map_err(|e| anyhow::anyhow!("config field epsilon: {e}"))?,
            ),
        };

        macro_rules! fill {
            ($($field:ident = $value:expr),+ $(,)?) => {
                $(if self.$field.is_none() { self.$field = $value; })+
            };
        }
        fill!(
            traces = rebase(&base, file.traces),
            synth = rebase(&base, file.synth),
            format = parse("format", file.format)?,
            risk = parse("risk", file.risk)?,
            target = parse("target", file.target)?,
            loss = file.loss,
            clip = file.clip,
            bound = file.bound,
            method = parse("method", file.method)?,
            epsilon = epsilon,
            delta = file.delta,
            grid_step = file.grid_step,
            cal_fraction = file.cal_fraction,
            trials = file.trials,
            seed = file.seed,
            nu_mode = parse("nu_mode", file.nu_mode)?,
            lambda = file.lambda,
            calibration = rebase(&base, file.calibration),
            cost_weights = file.cost_weights,
            out = rebase(&base, file.out),
            output_format = file.output_format,
            summary = rebase(&base, file.summary),
        );
        Ok(self)
    }

    pub fn method(&self) -> Result<Method> {
        self.method.context("--method is required")
    }

    /// The single epsilon of a non-sweep command.
    pub fn epsilon(&self) -> Result<f64> {
        match &self.epsilon {
            None => bail!("--epsilon is required"),
            Some(Epsilons(v)) if v.len() == 1 => Ok(v[0]),
            Some(e) => bail!("expected one epsilon, got {e}; use `curve` for sweeps"),
        }
    }

    pub fn epsilons(&self) -> Result<&[f64]> {
        Ok(&self.epsilon.as_ref().context("--epsilon is required")?.0)
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(DEFAULT_DELTA)
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step.unwrap_or(DEFAULT_GRID_STEP)
    }

    pub fn cal_fraction(&self) -> f64 {
        self.cal_fraction.unwrap_or(DEFAULT_CAL_FRACTION)
    }

    pub fn trials(&self) -> usize {
        self.trials.unwrap_or(DEFAULT_TRIALS)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}
