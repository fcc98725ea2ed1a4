//! Early-exit traces: per-sample exit confidences together with per-exit
//! predictive distributions and/or precomputed per-exit losses.
//!
//! A [`TraceSet`] is the only view this crate has of a model. Exits are
//! numbered `1..=L`; exit `L` is the full model and carries no confidence,
//! since the exit rule never thresholds it.

mod io;
mod spec;
mod split;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_traces, save_traces, TraceFormat};
pub use spec::{RiskKind, RiskSpec, RiskTarget, ThresholdGrid};
pub use split::{split, split_indices};
pub use validate::{validate, Check, CheckSummary, ExitSummary, Failure, ValidationReport};

/// Per-entry rounding slack below which a row counts as exactly normalized.
const RENORM_SLACK: f64 = 4.0 * f64::EPSILON;

/// Tolerance on `|sum(p) - 1|` for a stored probability row.
pub const PROB_TOLERANCE: f64 = 1e-6;

/// One sample's view of every exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub id: String,
    /// `L - 1` confidences, one per intermediate exit.
    pub confidences: Vec<f64>,
    pub label: Option<usize>,
    /// `L` rows of `K` class probabilities.
    pub distributions: Option<Vec<Vec<f64>>>,
    /// Per-exit losses keyed by loss name, each of length `L`.
    pub losses: Option<BTreeMap<String, Vec<f64>>>,
}

impl ExitTrace {
    /// Predicted class at `exit` (1-based), ties broken towards the smallest index.
    pub fn predicted_class(&self, exit: usize) -> Option<usize> {
        let row = self.distributions.as_ref()?.get(exit.checked_sub(1)?)?;
        argmax(row)
    }

    pub fn loss(&self, name: &str) -> Option<&[f64]> {
        self.losses.as_ref()?.get(name).map(Vec::as_slice)
    }
}

pub(crate) fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &p) in row.iter().enumerate() {
        match best {
            Some((_, b)) if p <= b => {}
            _ => best = Some((k, p)),
        }
    }
    best.map(|(k, _)| k)
}

/// Shape-level description of a trace set, as declared in file headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    #[serde(rename = "L")]
    pub num_exits: usize,
    #[serde(rename = "K", default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub loss_names: Vec<String>,
    #[serde(default = "default_loss_bound")]
    pub loss_bound: f64,
}

fn default_loss_bound() -> f64 {
    1.0
}

/// A validated, immutable collection of exit traces.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    meta: TraceMeta,
    samples: Vec<ExitTrace>,
}

impl TraceSet {
    /// Validates every invariant and renormalizes accepted probability rows.
    pub fn new(meta: TraceMeta, mut samples: Vec<ExitTrace>) -> Result<Self> {
        let report = validate::validate_parts(&meta, &samples);
        if let Some(msg) = report.first_error() {
            return Err(Error::InvalidTraces(msg));
        }
        for sample in &mut samples {
            if let Some(rows) = sample.distributions.as_mut() {
                for row in rows {
                    let total: f64 = row.iter().sum();
                    // rows that already sum to 1 up to rounding are kept bit-exact
                    if (total - 1.0).abs() > RENORM_SLACK * row.len() as f64 {
                        row.iter_mut().for_each(|p| *p /= total);
                    }
                }
            }
        }
        Ok(Self { meta, samples })
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    pub fn num_exits(&self) -> usize {
        self.meta.num_exits
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.meta.num_classes
    }

    pub fn loss_names(&self) -> &[String] {
        &self.meta.loss_names
    }

    pub fn loss_bound(&self) -> f64 {
        self.meta.loss_bound
    }

    pub fn samples(&self) -> &[ExitTrace] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_distributions(&self) -> bool {
        self.meta.num_classes.is_some()
    }

    pub fn all_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    /// Sub-trace-set with the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            meta: self.meta.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Diagnostics for this (already valid) set.
    pub fn diagnostics(&self) -> ValidationReport {
        validate::validate_parts(&self.meta, &self.samples)
    }
}
