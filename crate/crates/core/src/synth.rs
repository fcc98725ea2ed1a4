//! Synthetic early-exit traces with controllable exit quality, confidence
//! noise, marginal monotonicity and overthinking.
//!
//! Each sample draws a latent difficulty `d ~ N(0, spread^2)`. Exit `l` is
//! correct with probability `q_l = sigmoid(base_logit + gain_1 + .. + gain_{l-1} - d)`,
//! and all exits share one uniform draw `u` (exit `l` is correct iff `u < q_l`),
//! so with non-negative gains a sample never gets worse at a later exit.
//! A fraction `overthinking_frac` of samples is then made wrong at the final
//! exit while keeping at least one earlier exit correct.
//!
//! Confidences are `sigmoid(logit(q_l) + noise * z)`, a noisy transform of the
//! true correctness probability rather than the predicted distribution's max.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{ExitTrace, TraceMeta, TraceSet};

/// Name of the stored 0-1 loss.
pub const ZERO_ONE: &str = "zo";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    #[serde(rename = "L")]
    pub num_exits: usize,
    #[serde(rename = "K")]
    pub num_classes: usize,
    #[serde(default = "defaults::spread")]
    pub difficulty_spread: f64,
    /// Correctness-logit increment from exit `l` to `l + 1`; `L - 1` entries.
    pub exit_gain: Vec<f64>,
    #[serde(default)]
    pub overthinking_frac: f64,
    #[serde(default = "defaults::noise")]
    pub confidence_noise: f64,
    /// Correctness logit at the first exit for a sample of median difficulty.
    #[serde(default)]
    pub base_logit: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn spread() -> f64 {
        1.5
    }
    pub fn noise() -> f64 {
        0.5
    }
}

impl SynthConfig {
    /// Monotone 5-exit, 10-class model.
    pub fn monotone(n: usize, seed: u64) -> Self {
        Self {
            n,
            num_exits: 5,
            num_classes: 10,
            difficulty_spread: defaults::spread(),
            exit_gain: vec![0.8, 0.6, 0.4, 0.3],
            overthinking_frac: 0.0,
            confidence_noise: defaults::noise(),
            base_logit: 0.0,
            seed,
        }
    }

    pub fn with_overthinking(mut self, frac: f64) -> Self {
        self.overthinking_frac = frac;
        self
    }

    /// Every assumption behind marginal monotonicity holds by construction.
    pub fn is_monotone(&self) -> bool {
        self.exit_gain.iter().all(|&g| g >= 0.0) && self.overthinking_frac == 0.0
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.num_exits < 2 {
            return bad(format!("L must be >= 2, got {}", self.num_exits));
        }
        if self.num_classes < 2 {
            return bad(format!("K must be >= 2, got {}", self.num_classes));
        }
        if self.exit_gain.len() + 1 != self.num_exits {
            return bad(format!(
                "exit_gain needs L - 1 = {} entries, got {}",
                self.num_exits - 1,
                self.exit_gain.len()
            ));
        }
        if self.exit_gain.iter().any(|g| !g.is_finite()) || !self.base_logit.is_finite() {
            return bad("exit gains and base logit must be finite".into());
        }
        if !(self.difficulty_spread >= 0.0 && self.difficulty_spread.is_finite()) {
            return bad(format!(
                "difficulty_spread must be >= 0, got {}",
                self.difficulty_spread
            ));
        }
        if !(0.0..=1.0).contains(&self.overthinking_frac) {
            return bad(format!(
                "overthinking_frac must lie in [0, 1], got {}",
                self.overthinking_frac
            ));
        }
        if !(self.confidence_noise >= 0.0 && self.confidence_noise.is_finite()) {
            return bad(format!(
                "confidence_noise must be >= 0, got {}",
                self.confidence_noise
            ));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn generate_one(cfg: &SynthConfig, i: usize) -> ExitTrace {
    let l = cfg.num_exits;
    let k = cfg.num_classes;
    let mut rng = seed::substream(cfg.seed, i as u64);

    let z: f64 = rng.sample(StandardNormal);
    let difficulty = cfg.difficulty_spread * z;
    let mut logits = Vec::with_capacity(l);
    let mut acc = cfg.base_logit - difficulty;
    logits.push(acc);
    for g in &cfg.exit_gain {
        acc += g;
        logits.push(acc);
    }
    let q: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();

    let u: f64 = rng.random();
    let mut correct: Vec<bool> = q.iter().map(|&p| u < p).collect();
    let overthinks = rng.random::<f64>() < cfg.overthinking_frac;
    if overthinks {
        correct[l - 1] = false;
        if !correct[..l - 1].iter().any(|&c| c) {
            let j = rng.random_range(0..l - 1);
            correct[j] = true;
        }
    }

    let label = rng.random_range(0..k);
    let top = 1.0 / k as f64 + (1.0 - 1.0 / k as f64) * (0.3 + 0.6 * q[l - 1]);
    let rest = (1.0 - top) / (k - 1) as f64;
    let mut distributions = Vec::with_capacity(l);
    let mut zero_one = Vec::with_capacity(l);
    for &ok in &correct {
        let predicted = if ok {
            label
        } else {
            // uniform over the other classes
            let w = rng.random_range(0..k - 1);
            if w >= label {
                w + 1
            } else {
                w
            }
        };
        let mut row = vec![rest; k];
        row[predicted] = top;
        distributions.push(row);
        zero_one.push(if ok { 0.0 } else { 1.0 });
    }

    let confidences = logits[..l - 1]
        .iter()
        .map(|&x| {
            let noise: f64 = rng.sample(StandardNormal);
            sigmoid(x + cfg.confidence_noise * noise)
        })
        .collect();

    ExitTrace {
        id: format!("s{i}"),
        confidences,
        label: Some(label),
        distributions: Some(distributions),
        losses: Some(BTreeMap::from([(ZERO_ONE.to_string(), zero_one)])),
    }
}

/// Generates `cfg.n` labeled samples with distributions and a stored 0-1 loss.
///
/// Sample `i` only depends on `(cfg, i)`, so the output does not depend on
/// the number of worker threads.
pub fn generate(cfg: &SynthConfig) -> Result<TraceSet> {
    cfg.check()?;
    let samples: Vec<ExitTrace> = (0..cfg.n).into_par_iter().map(|i| generate_one(cfg, i)).collect();
    let meta = TraceMeta {
        num_exits: cfg.num_exits,
        num_classes: Some(cfg.num_classes),
        loss_names: vec![ZERO_ONE.to_string()],
        loss_bound: 1.0,
    };
    TraceSet::new(meta, samples)
}
