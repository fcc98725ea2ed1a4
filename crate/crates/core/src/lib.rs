//! Risk-controlling exit thresholds for early-exit models.
//!
//! Given per-sample exit confidences and per-exit losses (or predictive
//! distributions), pick the smallest shared threshold `lambda` such that the
//! excess loss of exiting early, relative to running the full model, stays
//! below a tolerance `epsilon`: on the calibration data ([`Method::Emp`]), in
//! expectation ([`Method::Crc`]), or with probability `1 - delta`
//! ([`Method::Ucb`], [`Method::Ltt`]).

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod calibration;
pub mod error;
pub mod harness;
pub mod output;
pub mod risk;
pub mod seed;
pub mod synth;
pub mod trace;

pub use bounds::{hb_pvalue, wsr_upper_bound, NuMode, WsrConfig};
pub use calibration::{calibrate, CalibrationParams, CalibrationResult, Method};
pub use error::{Error, Result};
pub use harness::{check_guarantees, run_trials, GuaranteeVerdict, TrialConfig, TrialReport};
pub use risk::{
    brier_loss, check_marginal_monotonicity, derive_losses, efficiency_metrics, empirical_risk, exit_index,
    mean_pixel_brier, risk_curve, EfficiencyReport, LossMatrix, MonotonicityReport, RiskCurve,
};
pub use synth::{generate, SynthConfig};
pub use trace::{
    load_traces, save_traces, split, ExitTrace, RiskKind, RiskSpec, RiskTarget, ThresholdGrid, TraceFormat,
    TraceMeta, TraceSet,
};
