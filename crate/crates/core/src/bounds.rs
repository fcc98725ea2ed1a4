//! Concentration bounds used by the high-probability calibrators.
//!
//! [`wsr_upper_bound`] is a Waudby-Smith–Ramdas betting upper confidence
//! bound for the mean of losses in `[-B, B]`: for a candidate mean `eps`, a
//! gambler bets against "mean >= eps" with predictable bet sizes `nu_i`, and
//! `eps` is rejected once the running capital
//! `prod_j (1 - nu_j * (l_j - eps))` has exceeded `1/delta`. The bound is the
//! smallest rejected grid value.
//!
//! [`hb_pvalue`] is the Hoeffding–Bentkus p-value for `H0: R >= eps` with
//! losses in `[0, 1]`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

pub const DEFAULT_WSR_GRID_STEP: f64 = 1e-3;

/// Cap on the bet size `nu_i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuMode {
    /// `nu <= 1/(2B)`: capital stays non-negative for any losses in `[-B, B]`.
    HalfOverB,
    /// `nu <= 1/B`: valid when the risk itself is non-negative, as under
    /// marginal monotonicity of relative losses.
    #[default]
    OneOverB,
}

impl FromStr for NuMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "half_over_b" | "half" => Ok(NuMode::HalfOverB),
            "one_over_b" | "one" => Ok(NuMode::OneOverB),
            other => Err(Error::Config(format!("unknown nu mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsrConfig {
    pub delta: f64,
    pub bound: f64,
    pub nu_mode: NuMode,
    pub epsilon_grid_step: f64,
}

impl WsrConfig {
    pub fn new(delta: f64, bound: f64) -> Result<Self> {
        let cfg = Self {
            delta,
            bound,
            nu_mode: NuMode::default(),
            epsilon_grid_step: DEFAULT_WSR_GRID_STEP,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn with_nu_mode(mut self, mode: NuMode) -> Self {
        self.nu_mode = mode;
        self
    }

    pub fn with_grid_step(mut self, step: f64) -> Result<Self> {
        self.epsilon_grid_step = step;
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::Config(format!(
                "bound must be positive, got {}",
                self.bound
            )));
        }
        if !(self.epsilon_grid_step > 0.0 && self.epsilon_grid_step < 1.0) {
            return Err(Error::Config(format!(
                "epsilon grid step must lie in (0, 1), got {}",
                self.epsilon_grid_step
            )));
        }
        Ok(())
    }

    pub fn nu_max(&self) -> f64 {
        match self.nu_mode {
            NuMode::HalfOverB => 1.0 / (2.0 * self.bound),
            NuMode::OneOverB => 1.0 / self.bound,
        }
    }

    /// Number of candidate means `0, step, 2*step, ...` strictly below `B`.
    fn grid_len(&self) -> usize {
        ((self.bound / self.epsilon_grid_step) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Result of [`wsr_upper_bound_detailed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WsrOutcome {
    pub bound: f64,
    /// Smallest capital factor `1 - nu_j (l_j - eps)` seen while searching.
    pub min_factor: f64,
}

/// Predictable bet sizes: running mean and variance with priors 1/2 and 1/4,
/// and `nu_i` based on the variance after `i - 1` steps (prior variance 1 at `i = 0`).
fn bet_sizes(losses: &[f64], cfg: &WsrConfig) -> Vec<f64> {
    let n = losses.len() as f64;
    let scale = 2.0 * (1.0 / cfg.delta).ln() / n;
    let nu_max = cfg.nu_max();
    let mut sum = 0.0;
    let mut sq_dev = 0.0;
    let mut prev_var = 1.0;
    let mut nu = Vec::with_capacity(losses.len());
    for (i, &l) in losses.iter().enumerate() {
        nu.push(nu_max.min((scale / prev_var).sqrt()));
        let count = (i + 1) as f64;
        sum += l;
        let mean = (0.5 + sum) / count;
        sq_dev += (l - mean) * (l - mean);
        prev_var = (0.25 + sq_dev) / count;
    }
    nu
}

/// Largest running log-capital at candidate mean `eps`.
fn max_log_capital(losses: &[f64], nu: &[f64], eps: f64, min_factor: &mut f64) -> Result<f64> {
    let mut log_cap = 0.0;
    let mut best = f64::NEG_INFINITY;
    for (&l, &v) in losses.iter().zip(nu) {
        let factor = 1.0 - v * (l - eps);
        *min_factor = min_factor.min(factor);
        if factor < -1e-12 {
            return Err(Error::OutOfRange(format!(
                "negative capital factor {factor} (loss {l}, bet {v}, eps {eps})"
            )));
        }
        if factor <= 0.0 {
            // capital is gone for good
            break;
        }
        log_cap += factor.ln();
        best = best.max(log_cap);
    }
    Ok(best)
}

fn check_losses(losses: &[f64], bound: f64) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::MissingData("empty loss vector".into()));
    }
    if let Some(l) = losses.iter().find(|l| !(l.abs() <= bound + 1e-12)) {
        return Err(Error::OutOfRange(format!("loss {l} outside [-{bound}, {bound}]")));
    }
    Ok(())
}

/// Upper confidence bound on the mean of `losses`, in `[0, B]`.
///
/// Returns `B` when no candidate below `B` is rejected.
pub fn wsr_upper_bound(losses: &[f64], cfg: &WsrConfig) -> Result<f64> {
    wsr_upper_bound_detailed(losses, cfg).map(|o| o.bound)
}

pub fn wsr_upper_bound_detailed(losses: &[f64], cfg: &WsrConfig) -> Result<WsrOutcome> {
    cfg.check()?;
    check_losses(losses, cfg.bound)?;
    let nu = bet_sizes(losses, cfg);
    let threshold = (1.0 / cfg.delta).ln();
    let mut min_factor = f64::INFINITY;
    let step = cfg.epsilon_grid_step;
    let mut rejects = |k: usize| -> Result<bool> {
        Ok(max_log_capital(losses, &nu, k as f64 * step, &mut min_factor)? > threshold)
    };

    // Capital is non-decreasing in eps, so the first rejected grid point
    // can be found by bisection.
    let len = cfg.grid_len();
    let (mut lo, mut hi) = (0usize, len);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if rejects(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let bound = if lo < len { lo as f64 * step } else { cfg.bound };
    Ok(WsrOutcome { bound, min_factor })
}

/// Hoeffding–Bentkus p-value for `H0: R >= epsilon` given the empirical risk
/// of `n` losses in `[0, 1]`.
pub fn hb_pvalue(empirical_risk: f64, n: usize, epsilon: f64) -> Result<f64> {
    if !(-1e-12..=1.0 + 1e-12).contains(&empirical_risk) {
        return Err(Error::OutOfRange(format!(
            "empirical risk {empirical_risk} outside [0, 1]"
        )));
    }
    if n == 0 {
        return Err(Error::MissingData("no calibration samples".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::OutOfRange(format!("epsilon {epsilon} outside (0, 1)")));
    }
    let r = empirical_risk.clamp(0.0, 1.0);
    if r >= epsilon {
        return Ok(1.0);
    }
    let nf = n as f64;
    let kl = if r == 0.0 {
        (1.0 / (1.0 - epsilon)).ln()
    } else {
        r * (r / epsilon).ln() + (1.0 - r) * ((1.0 - r) / (1.0 - epsilon)).ln()
    };
    let hoeffding = (-nf * kl).exp();
    // nR is an integer count up to rounding in the mean
    let k = (nf * r - 1e-9).ceil().max(0.0) as u64;
    let binom = Binomial::new(epsilon, n as u64)
        .map_err(|e| Error::OutOfRange(format!("binomial({n}, {epsilon}): {e}")))?;
    let bentkus = std::f64::consts::E * binom.cdf(k);
    Ok(hoeffding.min(bentkus).clamp(f64::MIN_POSITIVE, 1.0))
}
