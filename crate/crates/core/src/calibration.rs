//! Threshold selection over a descending grid.
//!
//! Every selector returns the smallest grid threshold it can certify, or
//! falls back to `lambda = 1` (full model only) when nothing is certified.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{hb_pvalue, wsr_upper_bound, NuMode, WsrConfig, DEFAULT_WSR_GRID_STEP};
use crate::error::{Error, Result};
use crate::risk::{exits_at, relative_losses, risk_curve, LossMatrix, RiskCurve};
use crate::trace::{ThresholdGrid, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Smallest threshold whose calibration risk is within tolerance.
    Emp,
    /// Conformal risk control: risk control in expectation.
    Crc,
    /// Upper confidence bound (betting bound): risk control with high probability.
    Ucb,
    /// Learn-then-test with fixed-sequence testing of Hoeffding–Bentkus p-values.
    Ltt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Emp, Method::Crc, Method::Ucb, Method::Ltt];

    /// Whether the guarantee is a `1 - delta` probability statement.
    pub fn needs_delta(self) -> bool {
        matches!(self, Method::Ucb | Method::Ltt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Emp => "emp",
            Method::Crc => "crc",
            Method::Ucb => "ucb",
            Method::Ltt => "ltt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (emp, crc, ucb, ltt)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub method: Method,
    pub lambda_hat: f64,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub risk_curve: RiskCurve,
    /// Per-grid-point upper bound (UCB) or p-value (LTT); `None` where not evaluated.
    pub bound_curve: Option<Vec<Option<f64>>>,
    /// No threshold below 1 was certified.
    pub empty_set: bool,
}

/// Flat JSON layout of a [`CalibrationResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationExport {
    pub method: Method,
    pub lambda_hat: f64,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub empty_set: bool,
    pub lambda: Vec<f64>,
    pub risk: Vec<f64>,
    pub bound_or_pvalue: Vec<Option<f64>>,
}

impl CalibrationResult {
    pub fn export(&self) -> CalibrationExport {
        CalibrationExport {
            method: self.method,
            lambda_hat: self.lambda_hat,
            epsilon: self.epsilon,
            delta: self.delta,
            empty_set: self.empty_set,
            lambda: self.risk_curve.lambdas.clone(),
            risk: self.risk_curve.values.clone(),
            bound_or_pvalue: self
                .bound_curve
                .clone()
                .unwrap_or_else(|| vec![None; self.risk_curve.len()]),
        }
    }
}

fn smallest_where(curve: &RiskCurve, ok: impl Fn(f64) -> bool) -> Option<f64> {
    curve
        .lambdas
        .iter()
        .zip(&curve.values)
        .filter(|(_, &r)| ok(r))
        .map(|(&l, _)| l)
        .reduce(f64::min)
}

/// `min { lambda : R(lambda; D_cal) <= epsilon }`.
pub fn lambda_empirical(curve: &RiskCurve, epsilon: f64) -> CalibrationResult {
    let found = smallest_where(curve, |r| r <= epsilon);
    CalibrationResult {
        method: Method::Emp,
        lambda_hat: found.unwrap_or(1.0),
        epsilon,
        delta: None,
        risk_curve: curve.clone(),
        bound_curve: None,
        empty_set: found.is_none(),
    }
}

/// `min { lambda : n/(n+1) R(lambda; D_cal) + B/(n+1) <= epsilon }`, or 1 if empty.
pub fn lambda_crc(curve: &RiskCurve, epsilon: f64, bound: f64, n: usize) -> Result<CalibrationResult> {
    if n == 0 {
        return Err(Error::MissingData(
            "CRC needs at least one calibration sample".into(),
        ));
    }
    if !(bound > 0.0) {
        return Err(Error::Config(format!("bound must be positive, got {bound}")));
    }
    let nf = n as f64;
    let found = smallest_where(curve, |r| (nf * r + bound) / (nf + 1.0) <= epsilon);
    Ok(CalibrationResult {
        method: Method::Crc,
        lambda_hat: found.unwrap_or(1.0),
        epsilon,
        delta: None,
        risk_curve: curve.clone(),
        bound_curve: None,
        empty_set: found.is_none(),
    })
}

/// Upper confidence bound at every grid point below 1 (index 0 stays `None`).
///
/// Consecutive thresholds that select the same exits share one bound.
pub fn ucb_curve(
    lm: &LossMatrix,
    ts: &TraceSet,
    grid: &ThresholdGrid,
    wsr: &WsrConfig,
) -> Result<Vec<Option<f64>>> {
    let lambdas = &grid.values()[1..];
    let exits: Vec<Vec<usize>> = lambdas.par_iter().map(|&l| exits_at(ts, l)).collect();
    let mut group_start = Vec::new();
    for j in 0..exits.len() {
        if j == 0 || exits[j] != exits[j - 1] {
            group_start.push(j);
        }
    }
    let bounds: Vec<f64> = group_start
        .par_iter()
        .map(|&j| wsr_upper_bound(&relative_losses(lm, ts, lambdas[j])?, wsr))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(grid.len());
    out.push(None);
    let mut g = 0;
    for j in 0..exits.len() {
        if g + 1 < group_start.len() && group_start[g + 1] == j {
            g += 1;
        }
        out.push(Some(bounds[g]));
    }
    Ok(out)
}

/// Descending scan: stop at the first grid point whose bound reaches
/// `epsilon` and return the previous grid value.
pub(crate) fn scan_ucb(grid: &[f64], bounds: &[Option<f64>], epsilon: f64) -> (f64, bool) {
    for j in 1..grid.len() {
        if bounds[j].is_some_and(|b| b >= epsilon) {
            return (grid[j - 1], j == 1);
        }
    }
    (*grid.last().expect("non-empty grid"), false)
}

/// `min { lambda : R+(lambda') < epsilon for all grid lambda' >= lambda }`.
pub fn lambda_ucb(
    lm: &LossMatrix,
    ts: &TraceSet,
    grid: &ThresholdGrid,
    epsilon: f64,
    wsr: &WsrConfig,
) -> Result<CalibrationResult> {
    let bounds = ucb_curve(lm, ts, grid, wsr)?;
    let (lambda_hat, empty_set) = scan_ucb(grid.values(), &bounds, epsilon);
    Ok(CalibrationResult {
        method: Method::Ucb,
        lambda_hat,
        epsilon,
        delta: Some(wsr.delta),
        risk_curve: risk_curve(lm, ts, grid)?,
        bound_curve: Some(bounds),
        empty_set,
    })
}

/// Fixed-sequence testing of `H0: R(lambda) >= epsilon` down the grid.
///
/// Relative losses are clipped at zero and divided by `B`, so the tested
/// level is `epsilon / B`. Testing stops at the first p-value above `delta`.
pub fn lambda_ltt(
    lm: &LossMatrix,
    ts: &TraceSet,
    grid: &ThresholdGrid,
    epsilon: f64,
    delta: f64,
    bound: f64,
) -> Result<CalibrationResult> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(bound > 0.0) {
        return Err(Error::Config(format!("bound must be positive, got {bound}")));
    }
    let level = epsilon / bound;
    let n = ts.len();
    let mut pvalues = vec![None; grid.len()];
    let mut lambda_hat = 1.0;
    for (j, &lambda) in grid.values().iter().enumerate().skip(1) {
        let losses = relative_losses(lm, ts, lambda)?;
        let scaled = losses.iter().map(|l| l.max(0.0) / bound).sum::<f64>() / n.max(1) as f64;
        let p = hb_pvalue(scaled.min(1.0), n, level)?;
        pvalues[j] = Some(p);
        if p > delta {
            break;
        }
        lambda_hat = lambda;
    }
    Ok(CalibrationResult {
        method: Method::Ltt,
        lambda_hat,
        epsilon,
        delta: Some(delta),
        risk_curve: risk_curve(lm, ts, grid)?,
        bound_curve: Some(pvalues),
        empty_set: lambda_hat == 1.0,
    })
}

/// Method choice and tolerances for [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub method: Method,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub nu_mode: NuMode,
    pub wsr_grid_step: f64,
}

impl CalibrationParams {
    pub fn new(method: Method, epsilon: f64, delta: Option<f64>) -> Self {
        Self {
            method,
            epsilon,
            delta,
            nu_mode: NuMode::default(),
            wsr_grid_step: DEFAULT_WSR_GRID_STEP,
        }
    }

    pub fn with_nu_mode(mut self, mode: NuMode) -> Self {
        self.nu_mode = mode;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.method.needs_delta() && self.delta.is_none() {
            return Err(Error::Config(format!("method {} needs delta", self.method)));
        }
        Ok(())
    }
}

/// Selects a threshold on calibration data with any [`Method`]. The loss
/// bound `B` is taken from the loss matrix's risk spec.
pub fn calibrate(
    lm: &LossMatrix,
    ts: &TraceSet,
    grid: &ThresholdGrid,
    params: &CalibrationParams,
) -> Result<CalibrationResult> {
    params.check()?;
    let bound = lm.spec().bound;
    match params.method {
        Method::Emp => Ok(lambda_empirical(&risk_curve(lm, ts, grid)?, params.epsilon)),
        Method::Crc => lambda_crc(&risk_curve(lm, ts, grid)?, params.epsilon, bound, ts.len()),
        Method::Ucb => {
            let wsr = WsrConfig::new(params.delta.expect("checked"), bound)?
                .with_nu_mode(params.nu_mode)
                .with_grid_step(params.wsr_grid_step)?;
            lambda_ucb(lm, ts, grid, params.epsilon, &wsr)
        }
        Method::Ltt => lambda_ltt(
            lm,
            ts,
            grid,
            params.epsilon,
            params.delta.expect("checked"),
            bound,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(lambdas: &[f64], values: &[f64]) -> RiskCurve {
        RiskCurve {
            lambdas: lambdas.to_vec(),
            values: values.to_vec(),
            exit_fractions: vec![vec![]; lambdas.len()],
        }
    }

    #[test]
    fn empirical_on_zero_curve_takes_smallest() {
        let g = ThresholdGrid::new(0.1).unwrap();
        let c = curve(g.values(), &vec![0.0; g.len()]);
        let r = lambda_empirical(&c, 0.05);
        assert_eq!(r.lambda_hat, g.last());
        assert!(!r.empty_set);
    }

    #[test]
    fn crc_condition_rearranges() {
        // n = 9, B = 1, eps = 0.2  <=>  R <= 1/9
        let c = curve(&[1.0, 0.9, 0.8, 0.7], &[0.0, 0.1, 1.0 / 9.0, 0.12]);
        let r = lambda_crc(&c, 0.2, 1.0, 9).unwrap();
        assert_eq!(r.lambda_hat, 0.8);
        let oracle = c
            .lambdas
            .iter()
            .zip(&c.values)
            .filter(|(_, &v)| v <= 1.0 / 9.0)
            .map(|(&l, _)| l)
            .fold(1.0, f64::min);
        assert_eq!(r.lambda_hat, oracle);
    }

    #[test]
    fn crc_empty_set_defaults_to_one() {
        let c = curve(&[1.0, 0.9, 0.8], &[0.0, 0.01, 0.02]);
        let r = lambda_crc(&c, 0.05, 1.0, 10).unwrap();
        assert!(r.empty_set);
        assert_eq!(r.lambda_hat, 1.0);
        assert!(lambda_crc(&c, 0.05, 1.0, 0).is_err());
    }

    #[test]
    fn ucb_scan_semantics() {
        let g = [1.0, 0.9, 0.8, 0.7, 0.6];
        let b = |v: &[f64]| -> Vec<Option<f64>> {
            std::iter::once(None).chain(v.iter().copied().map(Some)).collect()
        };
        assert_eq!(scan_ucb(&g, &b(&[0.01, 0.02, 0.2, 0.01]), 0.1), (0.8, false));
        assert_eq!(scan_ucb(&g, &b(&[0.2, 0.0, 0.0, 0.0]), 0.1), (1.0, true));
        assert_eq!(scan_ucb(&g, &b(&[0.0, 0.0, 0.0, 0.0]), 0.1), (0.6, false));
        // bound equal to epsilon is a violation
        assert_eq!(scan_ucb(&g, &b(&[0.0, 0.1, 0.0, 0.0]), 0.1), (0.9, false));
    }

    #[test]
    fn method_strings() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("rcps".parse::<Method>().is_err());
        assert!(CalibrationParams::new(Method::Ucb, 0.1, None).check().is_err());
        assert!(CalibrationParams::new(Method::Crc, 0.1, None).check().is_ok());
    }
}
