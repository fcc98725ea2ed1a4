use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::{ExitTrace, TraceMeta, PROB_TOLERANCE};

/// Invariants checked per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    ConfidenceCount,
    ConfidenceRange,
    OutputsPresent,
    LabelRange,
    DistributionShape,
    DistributionNormalized,
    LossShape,
    LossRange,
}

impl Check {
    pub const ALL: [Check; 8] = [
        Check::ConfidenceCount,
        Check::ConfidenceRange,
        Check::OutputsPresent,
        Check::LabelRange,
        Check::DistributionShape,
        Check::DistributionNormalized,
        Check::LossShape,
        Check::LossRange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::ConfidenceCount => "confidence count",
            Check::ConfidenceRange => "confidence out of range",
            Check::OutputsPresent => "outputs present",
            Check::LabelRange => "label out of range",
            Check::DistributionShape => "distribution shape",
            Check::DistributionNormalized => "probability row not normalized",
            Check::LossShape => "loss shape",
            Check::LossRange => "loss out of range",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub check: Check,
    pub passed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    /// Position of the sample in the set.
    pub index: usize,
    pub sample_id: String,
    pub check: Check,
    pub message: String,
}

/// Per-exit summary statistics over the samples whose shape is valid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitSummary {
    /// Mean confidence at exits `1..L-1`.
    pub mean_confidence: Vec<f64>,
    /// Mean stored loss at exits `1..L`, per loss name.
    pub mean_loss: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub num_samples: usize,
    /// Set-level problems (bad header, duplicate loss names).
    pub meta_errors: Vec<String>,
    pub checks: Vec<CheckSummary>,
    pub failures: Vec<Failure>,
    pub exits: ExitSummary,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.meta_errors.is_empty() && self.failures.is_empty()
    }

    pub fn violations(&self) -> usize {
        self.meta_errors.len() + self.failures.len()
    }

    pub(crate) fn first_error(&self) -> Option<String> {
        if let Some(m) = self.meta_errors.first() {
            return Some(m.clone());
        }
        self.failures
            .first()
            .map(|f| format!("sample {:?} (#{}): {}", f.sample_id, f.index, f.message))
    }
}

/// Checks every trace-set invariant without failing fast.
pub fn validate(meta: &TraceMeta, samples: &[ExitTrace]) -> ValidationReport {
    validate_parts(meta, samples)
}

pub(crate) fn meta_errors(meta: &TraceMeta) -> Vec<String> {
    let mut errors = Vec::new();
    if meta.num_exits < 2 {
        errors.push(format!("number of exits L must be >= 2, got {}", meta.num_exits));
    }
    if let Some(k) = meta.num_classes {
        if k < 2 {
            errors.push(format!("number of classes K must be >= 2, got {k}"));
        }
    }
    if !(meta.loss_bound.is_finite() && meta.loss_bound > 0.0) {
        errors.push(format!("loss bound must be positive, got {}", meta.loss_bound));
    }
    let mut seen = BTreeSet::new();
    for name in &meta.loss_names {
        if !seen.insert(name.as_str()) {
            errors.push(format!("duplicate loss name {name:?}"));
        }
    }
    errors
}

/// Violations for a single sample, in [`Check::ALL`] order.
pub(crate) fn sample_violations(meta: &TraceMeta, s: &ExitTrace) -> Vec<(Check, String)> {
    let l = meta.num_exits;
    let mut out = Vec::new();

    if s.confidences.len() + 1 != l {
        out.push((
            Check::ConfidenceCount,
            format!(
                "expected {} confidences, got {}",
                l.saturating_sub(1),
                s.confidences.len()
            ),
        ));
    }
    if let Some((j, c)) = s
        .confidences
        .iter()
        .enumerate()
        .find(|(_, c)| !(0.0..=1.0).contains(*c))
    {
        out.push((
            Check::ConfidenceRange,
            format!("confidence out of range: conf_{} = {c}", j + 1),
        ));
    }

    let has_losses = s.losses.as_ref().is_some_and(|m| !m.is_empty());
    if s.distributions.is_none() && !has_losses {
        out.push((
            Check::OutputsPresent,
            "neither distributions nor losses present".into(),
        ));
    } else if s.distributions.is_some() != meta.num_classes.is_some() {
        out.push((
            Check::OutputsPresent,
            if meta.num_classes.is_some() {
                "distributions declared but missing".into()
            } else {
                "distributions present but K not declared".into()
            },
        ));
    }

    if let (Some(y), Some(k)) = (s.label, meta.num_classes) {
        if y >= k {
            out.push((Check::LabelRange, format!("label {y} not below K = {k}")));
        }
    }

    if let (Some(rows), Some(k)) = (&s.distributions, meta.num_classes) {
        if rows.len() != l || rows.iter().any(|r| r.len() != k) {
            out.push((
                Check::DistributionShape,
                format!("expected {l} rows of {k} probabilities"),
            ));
        } else if let Some((exit, total)) = rows.iter().enumerate().find_map(|(e, r)| {
            let total: f64 = r.iter().sum();
            let bad = r.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > PROB_TOLERANCE;
            bad.then_some((e + 1, total))
        }) {
            out.push((
                Check::DistributionNormalized,
                format!("probability row not normalized at exit {exit} (sum {total})"),
            ));
        }
    }

    let empty = BTreeMap::new();
    let losses = s.losses.as_ref().unwrap_or(&empty);
    let declared: BTreeSet<&str> = meta.loss_names.iter().map(String::as_str).collect();
    let stored: BTreeSet<&str> = losses.keys().map(String::as_str).collect();
    if declared != stored {
        out.push((
            Check::LossShape,
            format!("loss names {stored:?} differ from declared {declared:?}"),
        ));
    } else if let Some(name) = losses.iter().find(|(_, v)| v.len() != l).map(|(n, _)| n) {
        out.push((Check::LossShape, format!("loss {name:?} needs {l} entries")));
    }
    let bound = meta.loss_bound;
    if let Some((name, v)) = losses
        .iter()
        .find_map(|(n, v)| v.iter().find(|x| !(0.0..=bound).contains(*x)).map(|x| (n, *x)))
    {
        out.push((
            Check::LossRange,
            format!("loss out of range: {name} = {v} not in [0, {bound}]"),
        ));
    }

    out
}

pub(crate) fn validate_parts(meta: &TraceMeta, samples: &[ExitTrace]) -> ValidationReport {
    let meta_errors = meta_errors(meta);
    let mut failed: BTreeMap<Check, usize> = BTreeMap::new();
    let mut failures = Vec::new();

    let l = meta.num_exits;
    let mut conf_sum = vec![0.0; l.saturating_sub(1)];
    let mut conf_n = 0usize;
    let mut loss_sum: BTreeMap<String, Vec<f64>> = meta
        .loss_names
        .iter()
        .map(|n| (n.clone(), vec![0.0; l]))
        .collect();
    let mut loss_n = 0usize;

    for (index, s) in samples.iter().enumerate() {
        let violations = sample_violations(meta, s);
        let shape_ok = |c: Check| !violations.iter().any(|(v, _)| *v == c);
        if shape_ok(Check::ConfidenceCount) {
            conf_n += 1;
            for (acc, c) in conf_sum.iter_mut().zip(&s.confidences) {
                *acc += c;
            }
        }
        if shape_ok(Check::LossShape) {
            if let Some(losses) = &s.losses {
                loss_n += 1;
                for (name, v) in losses {
                    if let Some(acc) = loss_sum.get_mut(name) {
                        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                    }
                }
            }
        }
        for (check, message) in violations {
            *failed.entry(check).or_default() += 1;
            failures.push(Failure {
                index,
                sample_id: s.id.clone(),
                check,
                message,
            });
        }
    }

    let checks = Check::ALL
        .iter()
        .map(|&check| {
            let f = failed.get(&check).copied().unwrap_or(0);
            CheckSummary {
                check,
                passed: samples.len() - f,
                failed: f,
            }
        })
        .collect();

    let mean = |sum: Vec<f64>, n: usize| -> Vec<f64> {
        if n == 0 {
            vec![f64::NAN; sum.len()]
        } else {
            sum.into_iter().map(|x| x / n as f64).collect()
        }
    };

    ValidationReport {
        num_samples: samples.len(),
        meta_errors,
        checks,
        failures,
        exits: ExitSummary {
            mean_confidence: mean(conf_sum, conf_n),
            mean_loss: loss_sum.into_iter().map(|(k, v)| (k, mean(v, loss_n))).collect(),
        },
    }
}
