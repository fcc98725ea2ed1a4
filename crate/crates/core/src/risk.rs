//! Exit selection, per-exit loss construction and empirical early-exit risk.
//!
//! The controlled quantity is always a *relative* loss: the loss of the
//! output at the chosen exit minus the loss of the full model's output on
//! the same sample. Its mean over a data set is the empirical risk
//! `R(lambda; D)`, which is exactly zero at the `lambda = 1` sentinel.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{argmax, RiskKind, RiskSpec, RiskTarget, ThresholdGrid, TraceSet, PROB_TOLERANCE};

/// Tolerance for the non-increasing check on per-exit mean losses.
pub const MONOTONE_TOLERANCE: f64 = 1e-9;

/// First exit (1-based) whose confidence reaches `lambda`, or `L` if none does.
///
/// `lambda >= 1` always selects the full model, even for confidences equal to 1.
pub fn exit_index(confidences: &[f64], lambda: f64) -> usize {
    let last = confidences.len() + 1;
    if lambda >= 1.0 {
        return last;
    }
    confidences
        .iter()
        .position(|&c| c >= lambda)
        .map_or(last, |j| j + 1)
}

/// Exit chosen by every sample of `ts` at `lambda`.
pub fn exits_at(ts: &TraceSet, lambda: f64) -> Vec<usize> {
    ts.samples()
        .iter()
        .map(|s| exit_index(&s.confidences, lambda))
        .collect()
}

/// Squared distance between `dist` and the one-hot encoding of `label`; in `[0, 2]`.
pub fn brier_loss(dist: &[f64], label: usize) -> Result<f64> {
    if label >= dist.len() {
        return Err(Error::OutOfRange(format!(
            "label {label} with {} classes",
            dist.len()
        )));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE || dist.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::OutOfRange(format!(
            "probability row not normalized (sum {total})"
        )));
    }
    Ok(dist
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let target = if k == label { 1.0 } else { 0.0 };
            (p - target) * (p - target)
        })
        .sum())
}

/// Average Brier loss over pixels (or any set of instances) of one output.
pub fn mean_pixel_brier(dists: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if dists.len() != labels.len() {
        return Err(Error::Misaligned(format!(
            "{} distributions but {} labels",
            dists.len(),
            labels.len()
        )));
    }
    if dists.is_empty() {
        return Err(Error::MissingData("no pixels".into()));
    }
    let mut total = 0.0;
    for (d, &y) in dists.iter().zip(labels) {
        total += brier_loss(d, y)?;
    }
    Ok(total / dists.len() as f64)
}

/// Per-sample, per-exit base losses for one [`RiskSpec`]; row `i` column `L`
/// holds the full model's loss on sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    n: usize,
    num_exits: usize,
    values: Vec<f64>,
    spec: RiskSpec,
}

impl LossMatrix {
    /// Builds a matrix from rows, checking entries lie in `[0, spec.bound]`.
    pub fn from_rows(rows: Vec<Vec<f64>>, spec: RiskSpec) -> Result<Self> {
        spec.check()?;
        let num_exits = rows.first().map_or(0, Vec::len);
        if num_exits < 2 {
            return Err(Error::InvalidTraces("loss rows need at least 2 exits".into()));
        }
        let n = rows.len();
        let mut values = Vec::with_capacity(n * num_exits);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != num_exits {
                return Err(Error::Misaligned(format!("row {i} has {} exits", row.len())));
            }
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0 && **v <= spec.bound + 1e-12)) {
                return Err(Error::OutOfRange(format!(
                    "loss {v} at sample #{i} outside [0, {}]",
                    spec.bound
                )));
            }
            values.extend(row);
        }
        Ok(Self {
            n,
            num_exits,
            values,
            spec,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_exits(&self) -> usize {
        self.num_exits
    }

    pub fn spec(&self) -> &RiskSpec {
        &self.spec
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_exits..(i + 1) * self.num_exits]
    }

    /// Relative loss of sample `i` when exiting at `exit` (1-based),
    /// clipped at zero if the spec asks for it.
    pub fn relative(&self, i: usize, exit: usize) -> f64 {
        let row = self.row(i);
        let diff = row[exit - 1] - row[self.num_exits - 1];
        if self.spec.clip_nonneg {
            diff.max(0.0)
        } else {
            diff
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.num_exits);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            n: indices.len(),
            num_exits: self.num_exits,
            values,
            spec: self.spec.clone(),
        }
    }

    /// Same losses under a different clipping mode.
    pub fn with_clipping(&self, clip: bool) -> Self {
        let mut out = self.clone();
        out.spec.clip_nonneg = clip;
        out
    }

    fn check_aligned(&self, ts: &TraceSet) -> Result<()> {
        if self.n != ts.len() || self.num_exits != ts.num_exits() {
            return Err(Error::Misaligned(format!(
                "loss matrix is {}x{}, trace set has {} samples with {} exits",
                self.n,
                self.num_exits,
                ts.len(),
                ts.num_exits()
            )));
        }
        Ok(())
    }
}

fn zero_one(a: usize, b: usize) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

/// Inverse-CDF draw of a class from `p`.
fn sample_class(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding slack above the running sum
    p.iter().rposition(|&pk| pk > 0.0).unwrap_or(p.len() - 1)
}

/// Builds the per-exit base losses selected by `spec`.
///
/// * gap / prediction: the named precomputed loss, else 0-1 loss of the argmax against the label;
/// * gap / distribution: Brier loss against the label;
/// * consistency / prediction: the named precomputed loss (final column must be 0), else
///   0-1 loss of each exit's argmax against the final exit's argmax;
/// * consistency / distribution: Brier loss against one label per sample drawn from the
///   final exit's distribution, using `spec.seed`.
pub fn derive_losses(ts: &TraceSet, spec: &RiskSpec) -> Result<LossMatrix> {
    spec.check()?;
    let l = ts.num_exits();
    let need_dists = || -> Result<()> {
        if ts.has_distributions() {
            Ok(())
        } else {
            Err(Error::MissingData(format!(
                "{}/{} risk needs stored distributions",
                spec.kind, spec.target
            )))
        }
    };
    let need_labels = || -> Result<()> {
        match ts.samples().iter().find(|s| s.label.is_none()) {
            None => Ok(()),
            Some(s) => Err(Error::MissingData(format!(
                "gap risk needs labels; sample {:?} is unlabeled",
                s.id
            ))),
        }
    };
    let dists =
        |i: usize| -> &Vec<Vec<f64>> { ts.samples()[i].distributions.as_ref().expect("checked above") };

    let named = match (&spec.loss_name, spec.target) {
        (Some(name), RiskTarget::Prediction) => {
            if !ts.loss_names().iter().any(|n| n == name) {
                return Err(Error::MissingData(format!("unknown loss {name:?}")));
            }
            Some(name.as_str())
        }
        _ => None,
    };

    let rows: Vec<Vec<f64>> = match (spec.kind, spec.target, named) {
        (kind, RiskTarget::Prediction, Some(name)) => {
            let rows: Vec<Vec<f64>> = ts
                .samples()
                .iter()
                .map(|s| s.loss(name).expect("validated").to_vec())
                .collect();
            if kind == RiskKind::Consistency {
                if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r[l - 1] != 0.0) {
                    return Err(Error::InvalidTraces(format!(
                        "consistency loss {name:?} must vanish at the final exit (sample #{i})"
                    )));
                }
            }
            rows
        }
        (RiskKind::Gap, RiskTarget::Prediction, None) => {
            need_dists()?;
            need_labels()?;
            (0..ts.len())
                .map(|i| {
                    let y = ts.samples()[i].label.expect("checked");
                    dists(i)
                        .iter()
                        .map(|row| zero_one(argmax(row).expect("K >= 2"), y))
                        .collect()
                })
                .collect()
        }
        (RiskKind::Gap, RiskTarget::Distribution, _) => {
            need_dists()?;
            need_labels()?;
            (0..ts.len())
                .map(|i| {
                    let y = ts.samples()[i].label.expect("checked");
                    dists(i).iter().map(|row| brier_loss(row, y)).collect()
                })
                .collect::<Result<_>>()?
        }
        (RiskKind::Consistency, RiskTarget::Prediction, None) => {
            need_dists()?;
            (0..ts.len())
                .map(|i| {
                    let d = dists(i);
                    let reference = argmax(&d[l - 1]).expect("K >= 2");
                    d.iter()
                        .map(|row| zero_one(argmax(row).expect("K >= 2"), reference))
                        .collect()
                })
                .collect()
        }
        (RiskKind::Consistency, RiskTarget::Distribution, _) => {
            need_dists()?;
            (0..ts.len())
                .map(|i| {
                    let d = dists(i);
                    let u: f64 = seed::substream(spec.seed, i as u64).random();
                    let reference = sample_class(&d[l - 1], u);
                    d.iter().map(|row| brier_loss(row, reference)).collect()
                })
                .collect::<Result<_>>()?
        }
    };
    LossMatrix::from_rows(rows, spec.clone())
}

/// Per-sample relative losses at `lambda`, in sample order.
pub fn relative_losses(lm: &LossMatrix, ts: &TraceSet, lambda: f64) -> Result<Vec<f64>> {
    lm.check_aligned(ts)?;
    Ok(ts
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| lm.relative(i, exit_index(&s.confidences, lambda)))
        .collect())
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Empirical early-exit risk at `lambda`: the mean relative loss.
pub fn empirical_risk(lm: &LossMatrix, ts: &TraceSet, lambda: f64) -> Result<f64> {
    Ok(mean(&relative_losses(lm, ts, lambda)?))
}

/// Empirical risk over a threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCurve {
    pub lambdas: Vec<f64>,
    pub values: Vec<f64>,
    /// `exit_fractions[j][l]`: share of samples leaving at exit `l + 1` for `lambdas[j]`.
    pub exit_fractions: Vec<Vec<f64>>,
}

impl RiskCurve {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// CSV with columns `lambda, risk, frac_exit_1..frac_exit_L`.
    pub fn to_csv(&self) -> String {
        let l = self.exit_fractions.first().map_or(0, Vec::len);
        let mut out = String::from("lambda,risk");
        for e in 1..=l {
            out.push_str(&format!(",frac_exit_{e}"));
        }
        out.push('\n');
        for ((lambda, risk), fracs) in self.lambdas.iter().zip(&self.values).zip(&self.exit_fractions) {
            out.push_str(&format!("{lambda},{risk}"));
            for f in fracs {
                out.push_str(&format!(",{f}"));
            }
            out.push('\n');
        }
        out
    }
}

/// [`empirical_risk`] at every grid value, plus the exit distribution there.
pub fn risk_curve(lm: &LossMatrix, ts: &TraceSet, grid: &ThresholdGrid) -> Result<RiskCurve> {
    lm.check_aligned(ts)?;
    let l = ts.num_exits();
    let n = ts.len().max(1) as f64;
    let points: Vec<(f64, Vec<f64>)> = grid
        .values()
        .par_iter()
        .map(|&lambda| {
            let mut counts = vec![0usize; l];
            let mut total = 0.0;
            for (i, s) in ts.samples().iter().enumerate() {
                let e = exit_index(&s.confidences, lambda);
                counts[e - 1] += 1;
                total += lm.relative(i, e);
            }
            (total / n, counts.into_iter().map(|c| c as f64 / n).collect())
        })
        .collect();
    let (values, exit_fractions) = points.into_iter().unzip();
    Ok(RiskCurve {
        lambdas: grid.values().to_vec(),
        values,
        exit_fractions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub mean_exit_layer: f64,
    /// `1 - mean_exit_layer / L`.
    pub relative_gain: f64,
    /// `1 - mean(cost at chosen exit) / cost at L`, when costs were supplied.
    pub cost_weighted_gain: Option<f64>,
}

/// Exit-layer savings at `lambda`. `cost_weights` are cumulative per-exit
/// costs (e.g. FLOPs up to and including each exit).
pub fn efficiency_metrics(
    ts: &TraceSet,
    lambda: f64,
    cost_weights: Option<&[f64]>,
) -> Result<EfficiencyReport> {
    let l = ts.num_exits();
    if let Some(costs) = cost_weights {
        if costs.len() != l {
            return Err(Error::Config(format!(
                "need {l} cost weights, got {}",
                costs.len()
            )));
        }
        if costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) || costs.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(
                "cost weights must be positive and non-decreasing".into(),
            ));
        }
    }
    if ts.is_empty() {
        return Err(Error::MissingData("no samples".into()));
    }
    let exits = exits_at(ts, lambda);
    let n = exits.len() as f64;
    let mean_exit_layer = exits.iter().sum::<usize>() as f64 / n;
    let cost_weighted_gain = cost_weights.map(|c| {
        let mean_cost = exits.iter().map(|&e| c[e - 1]).sum::<f64>() / n;
        1.0 - mean_cost / c[l - 1]
    });
    Ok(EfficiencyReport {
        mean_exit_layer,
        relative_gain: 1.0 - mean_exit_layer / l as f64,
        cost_weighted_gain,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    /// Mean base loss at each exit `1..=L`.
    pub mean_loss: Vec<f64>,
    /// Whether `mean_loss` is non-increasing up to [`MONOTONE_TOLERANCE`].
    pub monotone: bool,
}

/// Checks that performance improves on average from exit to exit.
pub fn check_marginal_monotonicity(lm: &LossMatrix) -> MonotonicityReport {
    let l = lm.num_exits();
    let mut sums = vec![0.0; l];
    for i in 0..lm.n() {
        sums.iter_mut().zip(lm.row(i)).for_each(|(s, v)| *s += v);
    }
    let n = lm.n().max(1) as f64;
    let mean_loss: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    MonotonicityReport {
        monotone: is_non_increasing(&mean_loss),
        mean_loss,
    }
}

pub(crate) fn is_non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + MONOTONE_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ExitTrace, TraceMeta};
    use std::collections::BTreeMap;

    fn three_sample() -> TraceSet {
        let rows = [
            ([0.9, 0.95], [1.0, 0.0, 0.0]),
            ([0.4, 0.8], [1.0, 1.0, 0.0]),
            ([0.2, 0.5], [0.0, 0.0, 0.0]),
        ];
        let samples = rows
            .iter()
            .enumerate()
            .map(|(i, (c, zo))| ExitTrace {
                id: format!("s{i}"),
                confidences: c.to_vec(),
                label: Some(0),
                distributions: None,
                losses: Some(BTreeMap::from([("zo".to_string(), zo.to_vec())])),
            })
            .collect();
        let meta = TraceMeta {
            num_exits: 3,
            num_classes: None,
            loss_names: vec!["zo".into()],
            loss_bound: 1.0,
        };
        TraceSet::new(meta, samples).unwrap()
    }

    fn dist_set(rows: Vec<(Vec<Vec<f64>>, Option<usize>)>) -> TraceSet {
        let l = rows[0].0.len();
        let k = rows[0].0[0].len();
        let samples = rows
            .into_iter()
            .enumerate()
            .map(|(i, (d, y))| ExitTrace {
                id: format!("d{i}"),
                confidences: vec![0.5; l - 1],
                label: y,
                distributions: Some(d),
                losses: None,
            })
            .collect();
        let meta = TraceMeta {
            num_exits: l,
            num_classes: Some(k),
            loss_names: vec![],
            loss_bound: 1.0,
        };
        TraceSet::new(meta, samples).unwrap()
    }

    #[test]
    fn exit_index_cases() {
        assert_eq!(exit_index(&[0.9, 0.95], 0.5), 1);
        assert_eq!(exit_index(&[0.4, 0.8], 0.85), 3);
        assert_eq!(exit_index(&[0.2, 0.5], 0.5), 2);
        assert_eq!(exit_index(&[1.0, 1.0], 1.0), 3);
        assert_eq!(exit_index(&[1.0, 1.0], 0.999), 1);
        assert_eq!(exit_index(&[0.0, 0.0], 0.0), 1);
    }

    #[test]
    fn brier_cases() {
        assert_eq!(brier_loss(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(brier_loss(&[0.0, 1.0, 0.0], 0).unwrap(), 2.0);
        assert_eq!(brier_loss(&[0.5, 0.5], 0).unwrap(), 0.5);
        assert!(brier_loss(&[0.5, 0.6], 0).is_err());
        assert!(brier_loss(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn mean_pixel_brier_cases() {
        let two = [vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(mean_pixel_brier(&two, &[0, 1]).unwrap(), 1.0);
        assert_eq!(
            mean_pixel_brier(&[vec![0.2, 0.8]], &[1]).unwrap(),
            brier_loss(&[0.2, 0.8], 1).unwrap()
        );
        let four = vec![vec![0.5, 0.5]; 4];
        assert_eq!(mean_pixel_brier(&four, &[0, 0, 1, 1]).unwrap(), 0.5);
        assert!(mean_pixel_brier(&four, &[0]).is_err());
        assert!(mean_pixel_brier(&[], &[]).is_err());
    }

    #[test]
    fn three_sample_risk_is_two_thirds() {
        let ts = three_sample();
        let lm = derive_losses(&ts, &RiskSpec::gap_zero_one().with_loss("zo")).unwrap();
        assert_eq!(exits_at(&ts, 0.6), vec![1, 2, 3]);
        let r = empirical_risk(&lm, &ts, 0.6).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(empirical_risk(&lm, &ts, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn gap_zero_one_from_distributions() {
        // exit 2 wrong, final exit right
        let ts = dist_set(vec![(
            vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.9, 0.1]],
            Some(0),
        )]);
        let lm = derive_losses(&ts, &RiskSpec::gap_zero_one()).unwrap();
        assert_eq!(lm.relative(0, 2), 1.0);
        assert_eq!(lm.relative(0, 3), 0.0);
    }

    #[test]
    fn overthinking_sample_is_negative_unless_clipped() {
        // exit 2 right, final exit wrong
        let ts = dist_set(vec![(
            vec![vec![0.7, 0.3], vec![0.8, 0.2], vec![0.1, 0.9]],
            Some(0),
        )]);
        let lm = derive_losses(&ts, &RiskSpec::gap_zero_one()).unwrap();
        assert_eq!(lm.relative(0, 2), -1.0);
        assert_eq!(empirical_risk(&lm, &ts, 0.5).unwrap(), -1.0);
        let clipped = lm.with_clipping(true);
        assert_eq!(clipped.relative(0, 2), 0.0);
        assert_eq!(empirical_risk(&clipped, &ts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn consistency_prediction_final_column_is_zero() {
        let ts = dist_set(vec![
            (vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.1, 0.9]], None),
            (vec![vec![0.6, 0.4], vec![0.6, 0.4], vec![0.6, 0.4]], None),
        ]);
        let spec = RiskSpec::new(RiskKind::Consistency, RiskTarget::Prediction);
        let lm = derive_losses(&ts, &spec).unwrap();
        for i in 0..lm.n() {
            assert_eq!(lm.row(i)[2], 0.0);
        }
        assert_eq!(lm.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn consistency_distribution_is_seeded() {
        let rows = (0..50)
            .map(|_| (vec![vec![0.5, 0.5], vec![0.3, 0.7]], None))
            .collect();
        let ts = dist_set(rows);
        let spec = RiskSpec::new(RiskKind::Consistency, RiskTarget::Distribution).with_seed(4);
        let a = derive_losses(&ts, &spec).unwrap();
        let b = derive_losses(&ts, &spec).unwrap();
        assert_eq!(a, b);
        let c = derive_losses(&ts, &spec.clone().with_seed(5)).unwrap();
        assert_ne!(a, c);
        // both labels are drawn at some point
        let finals: Vec<f64> = (0..a.n()).map(|i| a.row(i)[1]).collect();
        assert!(finals.iter().any(|&v| (v - 0.18).abs() < 1e-12));
        assert!(finals.iter().any(|&v| (v - 0.98).abs() < 1e-12));
    }

    #[test]
    fn derive_errors() {
        let unlabeled = dist_set(vec![(vec![vec![0.7, 0.3], vec![0.2, 0.8]], None)]);
        assert!(matches!(
            derive_losses(&unlabeled, &RiskSpec::gap_zero_one()),
            Err(Error::MissingData(_))
        ));
        let ts = three_sample();
        assert!(matches!(
            derive_losses(&ts, &RiskSpec::gap_zero_one()),
            Err(Error::MissingData(_))
        ));
        assert!(matches!(
            derive_losses(&ts, &RiskSpec::gap_zero_one().with_loss("bleu")),
            Err(Error::MissingData(_))
        ));
        // Brier needs B = 2
        let labeled = dist_set(vec![(vec![vec![0.0, 1.0], vec![0.2, 0.8]], Some(0))]);
        let spec = RiskSpec::new(RiskKind::Gap, RiskTarget::Distribution).with_bound(1.0);
        assert!(matches!(
            derive_losses(&labeled, &spec),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let ts = three_sample();
        let lm = derive_losses(&ts, &RiskSpec::gap_zero_one().with_loss("zo")).unwrap();
        let sub = ts.select(&[0, 1]);
        assert!(matches!(
            empirical_risk(&lm, &sub, 0.5),
            Err(Error::Misaligned(_))
        ));
    }

    #[test]
    fn curve_matches_pointwise_risk_and_exports_csv() {
        let ts = three_sample();
        let lm = derive_losses(&ts, &RiskSpec::gap_zero_one().with_loss("zo")).unwrap();
        let grid = ThresholdGrid::new(0.1).unwrap();
        let curve = risk_curve(&lm, &ts, &grid).unwrap();
        assert_eq!(curve.values[0], 0.0);
        for (lambda, v) in curve.lambdas.iter().zip(&curve.values) {
            assert_eq!(*v, empirical_risk(&lm, &ts, *lambda).unwrap());
            if *lambda > 0.5 + 1e-12 && *lambda <= 0.8 + 1e-12 {
                assert!((v - 2.0 / 3.0).abs() < 1e-15, "lambda {lambda}: {v}");
            }
        }
        for fr in &curve.exit_fractions {
            assert!((fr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let csv = curve.to_csv();
        assert!(csv.starts_with("lambda,risk,frac_exit_1,frac_exit_2,frac_exit_3\n1,0,0,0,1\n"));
        assert_eq!(csv.lines().count(), grid.len() + 1);
    }

    #[test]
    fn efficiency_cases() {
        let ts = three_sample();
        let e = efficiency_metrics(&ts, 1.0, None).unwrap();
        assert_eq!((e.mean_exit_layer, e.relative_gain), (3.0, 0.0));
        let e = efficiency_metrics(&ts, 0.6, Some(&[1.0, 2.0, 4.0])).unwrap();
        assert_eq!(e.mean_exit_layer, 2.0);
        assert!((e.relative_gain - 1.0 / 3.0).abs() < 1e-15);
        assert!((e.cost_weighted_gain.unwrap() - (1.0 - 7.0 / 12.0)).abs() < 1e-15);
        assert!(efficiency_metrics(&ts, 0.6, Some(&[2.0, 1.0, 4.0])).is_err());
        assert!(efficiency_metrics(&ts, 0.6, Some(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn efficiency_half_and_half() {
        let meta = TraceMeta {
            num_exits: 4,
            num_classes: None,
            loss_names: vec!["zo".into()],
            loss_bound: 1.0,
        };
        let mk = |c: [f64; 3]| ExitTrace {
            id: "x".into(),
            confidences: c.to_vec(),
            label: None,
            distributions: None,
            losses: Some(BTreeMap::from([("zo".into(), vec![0.0; 4])])),
        };
        let ts = TraceSet::new(meta, vec![mk([0.9, 0.9, 0.9]), mk([0.1, 0.1, 0.9])]).unwrap();
        let e = efficiency_metrics(&ts, 0.5, None).unwrap();
        assert_eq!((e.mean_exit_layer, e.relative_gain), (2.0, 0.5));
        let all_first = ts.select(&[0, 0]);
        assert_eq!(
            efficiency_metrics(&all_first, 0.5, None).unwrap().relative_gain,
            0.75
        );
    }

    #[test]
    fn monotonicity_flag() {
        let spec = RiskSpec::gap_zero_one();
        let lm = LossMatrix::from_rows(vec![vec![0.4, 0.3, 0.1]], spec.clone()).unwrap();
        assert!(check_marginal_monotonicity(&lm).monotone);
        let lm = LossMatrix::from_rows(vec![vec![0.4, 0.45, 0.1]], spec).unwrap();
        let report = check_marginal_monotonicity(&lm);
        assert!(!report.monotone);
        assert_eq!(report.mean_loss, vec![0.4, 0.45, 0.1]);
    }
}
