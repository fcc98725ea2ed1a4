use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference the early exit is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    /// Excess loss against the ground-truth label.
    Gap,
    /// Excess loss against the full model's own output; needs no labels.
    Consistency,
}

/// What part of the exit's output is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskTarget {
    /// The predicted label (0-1 loss, or a precomputed task loss).
    Prediction,
    /// The full predictive distribution (Brier loss).
    Distribution,
}

macro_rules! str_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(RiskKind { "gap" => RiskKind::Gap, "consistency" => RiskKind::Consistency });
str_enum!(RiskTarget {
    "prediction" => RiskTarget::Prediction,
    "distribution" => RiskTarget::Distribution,
});

/// Which early-exit risk is controlled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub kind: RiskKind,
    pub target: RiskTarget,
    /// Precomputed loss to use for prediction targets; `None` derives 0-1
    /// loss from the stored distributions.
    #[serde(default)]
    pub loss_name: Option<String>,
    /// Clip per-sample relative losses at zero.
    #[serde(default)]
    pub clip_nonneg: bool,
    /// Bound `B` of the base loss; relative losses lie in `[-B, B]`.
    pub bound: f64,
    /// Seed for sampling reference labels (consistency + distribution only).
    #[serde(default)]
    pub seed: u64,
}

impl RiskSpec {
    pub fn new(kind: RiskKind, target: RiskTarget) -> Self {
        let bound = match target {
            RiskTarget::Prediction => 1.0,
            RiskTarget::Distribution => 2.0,
        };
        Self {
            kind,
            target,
            loss_name: None,
            clip_nonneg: false,
            bound,
            seed: 0,
        }
    }

    /// Gap risk with 0-1 loss, `B = 1`.
    pub fn gap_zero_one() -> Self {
        Self::new(RiskKind::Gap, RiskTarget::Prediction)
    }

    pub fn with_loss(mut self, name: impl Into<String>) -> Self {
        self.loss_name = Some(name.into());
        self
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn clipped(mut self, clip: bool) -> Self {
        self.clip_nonneg = clip;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::Config(format!(
                "loss bound must be positive, got {}",
                self.bound
            )));
        }
        Ok(())
    }
}

/// Descending candidate thresholds `1, 1-step, 1-2*step, ...`, all in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdGrid {
    step: f64,
    values: Vec<f64>,
}

impl ThresholdGrid {
    pub const DEFAULT_STEP: f64 = 0.01;

    pub fn new(step: f64) -> Result<Self> {
        if !(1e-9..1.0).contains(&step) {
            return Err(Error::Config(format!(
                "grid step must lie in [1e-9, 1), got {step}"
            )));
        }
        // Stop a hair above zero so that e.g. 1 - 100 * 0.01 is not kept.
        let floor = step * 1e-9;
        let values = (0..)
            .map(|k| 1.0 - k as f64 * step)
            .take_while(|&v| v > floor)
            // snap 0.8200000000000001 to 0.82
            .map(|v| (v * 1e12).round() / 1e12)
            .collect();
        Ok(Self { step, values })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Smallest grid value.
    pub fn last(&self) -> f64 {
        *self.values.last().expect("grid is never empty")
    }

    pub fn contains(&self, lambda: f64) -> bool {
        self.values.contains(&lambda)
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self::new(Self::DEFAULT_STEP).expect("default step is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_starts_at_one_and_descends() {
        let g = ThresholdGrid::new(0.01).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!(g.values()[0], 1.0);
        assert!(g.values().windows(2).all(|w| w[0] > w[1]));
        assert!(g.last() > 0.0 && (g.last() - 0.01).abs() < 1e-12);

        let g = ThresholdGrid::new(0.3).unwrap();
        assert_eq!(g.len(), 4);
        assert!((g.last() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_steps() {
        assert!(ThresholdGrid::new(0.0).is_err());
        assert!(ThresholdGrid::new(1.0).is_err());
        assert!(ThresholdGrid::new(f64::NAN).is_err());
    }

    #[test]
    fn enums_round_trip_through_strings() {
        for k in [RiskKind::Gap, RiskKind::Consistency] {
            assert_eq!(k.to_string().parse::<RiskKind>().unwrap(), k);
        }
        assert_eq!(
            "Distribution".parse::<RiskTarget>().unwrap(),
            RiskTarget::Distribution
        );
        assert!("brier".parse::<RiskTarget>().is_err());
    }

    #[test]
    fn spec_defaults_bound_by_target() {
        assert_eq!(RiskSpec::gap_zero_one().bound, 1.0);
        assert_eq!(RiskSpec::new(RiskKind::Gap, RiskTarget::Distribution).bound, 2.0);
        assert!(RiskSpec::gap_zero_one().with_bound(-1.0).check().is_err());
    }
}
