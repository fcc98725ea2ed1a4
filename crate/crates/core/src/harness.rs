//! Monte-Carlo verification of risk guarantees over repeated
//! calibration/test splits of one trace pool.

use rayon::prelude::*;
use serde::Serialize;

use crate::calibration::{calibrate, CalibrationParams, Method};
use crate::error::{Error, Result};
use crate::risk::{
    check_marginal_monotonicity, derive_losses, efficiency_metrics, empirical_risk, LossMatrix,
    MonotonicityReport,
};
use crate::seed;
use crate::trace::{split_indices, RiskSpec, ThresholdGrid, TraceSet};

/// Standard errors of slack allowed on the mean test risk.
pub const EXPECTATION_SE_MARGIN: f64 = 2.0;
/// Binomial standard errors of slack allowed on the violation rate.
pub const PROBABILITY_SE_MARGIN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub params: CalibrationParams,
    pub trials: usize,
    pub cal_fraction: f64,
    pub grid: ThresholdGrid,
    pub seed: u64,
    /// Cumulative per-exit costs for cost-weighted gains.
    pub cost_weights: Option<Vec<f64>>,
}

impl TrialConfig {
    pub fn new(params: CalibrationParams, trials: usize, cal_fraction: f64, seed: u64) -> Self {
        Self {
            params,
            trials,
            cal_fraction,
            grid: ThresholdGrid::default(),
            seed,
            cost_weights: None,
        }
    }

    pub fn with_grid(mut self, grid: ThresholdGrid) -> Self {
        self.grid = grid;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lambda_hat: f64,
    pub test_risk: f64,
    pub mean_exit: f64,
    pub gain: f64,
    pub cost_gain: Option<f64>,
    pub empty_set: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub method: Method,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub trials: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub mean_test_risk: f64,
    pub se_test_risk: f64,
    /// Share of trials with test risk above epsilon.
    pub violation_rate: f64,
    pub mean_gain: f64,
    pub std_gain: f64,
    pub mean_exit: f64,
    pub mean_lambda_hat: f64,
    pub empty_rate: f64,
    /// Per-exit mean losses over the whole pool.
    pub monotonicity: MonotonicityReport,
    pub records: Vec<TrialRecord>,
}

impl TrialReport {
    /// CSV with columns `trial, lambda_hat, test_risk, mean_exit, gain, empty_set`.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("trial,lambda_hat,test_risk,mean_exit,gain,empty_set\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.trial, r.lambda_hat, r.test_risk, r.mean_exit, r.gain, r.empty_set
            ));
        }
        out
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn run_one(
    ts: &TraceSet,
    lm: &LossMatrix,
    cfg: &TrialConfig,
    trial: usize,
) -> Result<(TrialRecord, usize, usize)> {
    let (cal, test) = split_indices(ts.len(), cfg.cal_fraction, seed::derive(cfg.seed, trial as u64))?;
    let (ts_cal, lm_cal) = (ts.select(&cal), lm.select(&cal));
    let (ts_test, lm_test) = (ts.select(&test), lm.select(&test));
    let result = calibrate(&lm_cal, &ts_cal, &cfg.grid, &cfg.params)?;
    let lambda = result.lambda_hat;
    let eff = efficiency_metrics(&ts_test, lambda, cfg.cost_weights.as_deref())?;
    let record = TrialRecord {
        trial,
        lambda_hat: lambda,
        test_risk: empirical_risk(&lm_test, &ts_test, lambda)?,
        mean_exit: eff.mean_exit_layer,
        gain: eff.relative_gain,
        cost_gain: eff.cost_weighted_gain,
        empty_set: result.empty_set,
    };
    Ok((record, cal.len(), test.len()))
}

/// Runs `cfg.trials` independent split-calibrate-test rounds.
///
/// Trial `s` splits with a seed derived from `(cfg.seed, s)` alone, so two
/// runs with the same seed see the same splits whatever the method.
pub fn run_trials(ts: &TraceSet, spec: &RiskSpec, cfg: &TrialConfig) -> Result<TrialReport> {
    let lm = derive_losses(ts, spec)?;
    run_trials_with_losses(ts, &lm, cfg)
}

/// [`run_trials`] with losses derived beforehand.
pub fn run_trials_with_losses(ts: &TraceSet, lm: &LossMatrix, cfg: &TrialConfig) -> Result<TrialReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    cfg.params.check()?;
    let outcomes: Vec<(TrialRecord, usize, usize)> = (0..cfg.trials)
        .into_par_iter()
        .map(|s| run_one(ts, lm, cfg, s))
        .collect::<Result<_>>()?;
    let (n_cal, n_test) = (outcomes[0].1, outcomes[0].2);
    let records: Vec<TrialRecord> = outcomes.into_iter().map(|(r, _, _)| r).collect();

    let s = records.len() as f64;
    let (mean_test_risk, sd_risk) = mean_sd(records.iter().map(|r| r.test_risk));
    let (mean_gain, std_gain) = mean_sd(records.iter().map(|r| r.gain));
    let eps = cfg.params.epsilon;
    Ok(TrialReport {
        method: cfg.params.method,
        epsilon: eps,
        delta: cfg.params.delta,
        trials: records.len(),
        n_cal,
        n_test,
        mean_test_risk,
        se_test_risk: sd_risk / s.sqrt(),
        violation_rate: records.iter().filter(|r| r.test_risk > eps).count() as f64 / s,
        mean_gain,
        std_gain,
        mean_exit: records.iter().map(|r| r.mean_exit).sum::<f64>() / s,
        mean_lambda_hat: records.iter().map(|r| r.lambda_hat).sum::<f64>() / s,
        empty_rate: records.iter().filter(|r| r.empty_set).count() as f64 / s,
        monotonicity: check_marginal_monotonicity(lm),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub observed: f64,
    pub limit: f64,
    /// Slack added to the target to form `limit`.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuaranteeVerdict {
    /// Mean test risk within `epsilon + 2 SE`.
    pub expectation: Verdict,
    /// Violation rate within `delta + 3 sqrt(delta (1 - delta) / S)`.
    pub high_probability: Option<Verdict>,
    /// Whether the pool's per-exit mean losses were non-increasing.
    pub marginally_monotone: bool,
}

impl GuaranteeVerdict {
    pub fn pass(&self) -> bool {
        self.expectation.pass && self.high_probability.as_ref().is_none_or(|v| v.pass)
    }
}

/// Binomial standard error of an observed rate under a true rate `p`.
pub fn binomial_se(p: f64, trials: usize) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// Compares a report against the expectation and high-probability targets.
pub fn check_guarantees(report: &TrialReport, epsilon: f64, delta: Option<f64>) -> Result<GuaranteeVerdict> {
    if report.method.needs_delta() && delta.is_none() {
        return Err(Error::Config(format!(
            "method {} needs delta for its verdict",
            report.method
        )));
    }
    let margin = EXPECTATION_SE_MARGIN * report.se_test_risk;
    let expectation = Verdict {
        pass: report.mean_test_risk <= epsilon + margin,
        observed: report.mean_test_risk,
        limit: epsilon + margin,
        margin,
    };
    let high_probability = delta.map(|d| {
        let margin = PROBABILITY_SE_MARGIN * binomial_se(d, report.trials);
        Verdict {
            pass: report.violation_rate <= d + margin,
            observed: report.violation_rate,
            limit: d + margin,
            margin,
        }
    });
    Ok(GuaranteeVerdict {
        expectation,
        high_probability,
        marginally_monotone: report.monotonicity.monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn report(mean: f64, se: f64, rate: f64, trials: usize, method: Method) -> TrialReport {
        TrialReport {
            method,
            epsilon: 0.05,
            delta: None,
            trials,
            n_cal: 0,
            n_test: 0,
            mean_test_risk: mean,
            se_test_risk: se,
            violation_rate: rate,
            mean_gain: 0.0,
            std_gain: 0.0,
            mean_exit: 0.0,
            mean_lambda_hat: 0.0,
            empty_rate: 0.0,
            monotonicity: MonotonicityReport {
                mean_loss: vec![],
                monotone: true,
            },
            records: vec![],
        }
    }

    #[test]
    fn expectation_rule() {
        let v = check_guarantees(&report(0.048, 0.002, 0.0, 100, Method::Crc), 0.05, None).unwrap();
        assert!(v.expectation.pass);
        assert!((v.expectation.limit - 0.054).abs() < 1e-15);
        assert!(v.high_probability.is_none());
        let v = check_guarantees(&report(0.06, 0.002, 0.0, 100, Method::Crc), 0.05, None).unwrap();
        assert!(!v.pass());
    }

    #[test]
    fn high_probability_rule() {
        let v = check_guarantees(&report(0.0, 0.0, 0.25, 500, Method::Ucb), 0.05, Some(0.1)).unwrap();
        assert!(!v.high_probability.unwrap().pass);
        let v = check_guarantees(&report(0.0, 0.0, 0.11, 500, Method::Ucb), 0.05, Some(0.1)).unwrap();
        assert!(v.high_probability.unwrap().pass);
        assert!(check_guarantees(&report(0.0, 0.0, 0.0, 500, Method::Ltt), 0.05, None).is_err());
    }

    #[test]
    fn trials_are_deterministic_and_prefix_stable() {
        let ts = generate(&SynthConfig::monotone(400, 1)).unwrap();
        let spec = RiskSpec::gap_zero_one();
        let cfg = TrialConfig::new(CalibrationParams::new(Method::Crc, 0.1, None), 12, 0.5, 3);
        let a = run_trials(&ts, &spec, &cfg).unwrap();
        let b = run_trials(&ts, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 12);
        assert_eq!((a.n_cal, a.n_test), (200, 200));
        let shorter = run_trials(&ts, &spec, &TrialConfig { trials: 5, ..cfg }).unwrap();
        assert_eq!(&a.records[..5], &shorter.records[..]);
        assert!(a
            .records_csv()
            .starts_with("trial,lambda_hat,test_risk,mean_exit,gain,empty_set\n0,"));
    }

    #[test]
    fn zero_trials_rejected() {
        let ts = generate(&SynthConfig::monotone(50, 1)).unwrap();
        let cfg = TrialConfig::new(CalibrationParams::new(Method::Emp, 0.1, None), 0, 0.5, 0);
        assert!(run_trials(&ts, &RiskSpec::gap_zero_one(), &cfg).is_err());
    }
}
