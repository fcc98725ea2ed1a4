//! Brute-force reference implementations shared by the integration tests.
//! Nothing here calls into the library's algorithms.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use eecal_core::{ExitTrace, TraceMeta, TraceSet};

/// Values computed offline with an independent script.
pub mod frozen {
    /// HB p-value at empirical risk 0, n = 100, epsilon = 0.05.
    pub const HB_ZERO_100_005: f64 = 0.005920529220334054;
    pub const HB_002_100_01: f64 = 0.005286744607654358;
    pub const HB_005_200_01: f64 = 0.02193993208590663;
    /// Betting bound for 10000 losses all equal to 0.1, delta 0.1, B 1.
    pub const WSR_CONST_01: f64 = 0.101;
    /// Betting bound for 100 zero losses, delta 0.1, B 1, nu_max 1.
    pub const WSR_ZEROS_100: f64 = 0.025;
}

/// First exit whose confidence reaches `lambda`, 1-based; `L` otherwise.
pub fn exit_index(conf: &[f64], lambda: f64) -> usize {
    let mut e = conf.len() + 1;
    for l in (0..conf.len()).rev() {
        if conf[l] >= lambda {
            e = l + 1;
        }
    }
    e
}

/// Mean of `loss[exit] - loss[L]` over samples.
pub fn empirical_risk(confs: &[Vec<f64>], losses: &[Vec<f64>], lambda: f64, clip: bool) -> f64 {
    let mut total = 0.0;
    for (c, row) in confs.iter().zip(losses) {
        let e = exit_index(c, lambda);
        let mut d = row[e - 1] - row[row.len() - 1];
        if clip && d < 0.0 {
            d = 0.0;
        }
        total += d;
    }
    total / confs.len() as f64
}

pub fn brier(dist: &[f64], label: usize) -> f64 {
    let mut s = 0.0;
    for (k, p) in dist.iter().enumerate() {
        let y = if k == label { 1.0 } else { 0.0 };
        s += (p - y) * (p - y);
    }
    s
}

fn kl_bernoulli(a: f64, b: f64) -> f64 {
    let t1 = if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    let t2 = if a < 1.0 {
        (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
    } else {
        0.0
    };
    t1 + t2
}

/// Binomial CDF by summing the pmf term by term.
pub fn binom_cdf(k: usize, n: usize, p: f64) -> f64 {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut total = pmf;
    for j in 0..k.min(n) {
        pmf *= (n - j) as f64 / (j + 1) as f64 * p / (1.0 - p);
        total += pmf;
    }
    total.min(1.0)
}

pub fn hb_pvalue(r: f64, n: usize, eps: f64) -> f64 {
    if r >= eps {
        return 1.0;
    }
    let hoeffding = (-(n as f64) * kl_bernoulli(r, eps)).exp();
    let k = (n as f64 * r - 1e-9).ceil().max(0.0) as usize;
    let bentkus = std::f64::consts::E * binom_cdf(k, n, eps);
    hoeffding.min(bentkus).min(1.0)
}

/// Linear scan over `0, step, ..` below `b` with plain products.
pub fn wsr_bound(losses: &[f64], delta: f64, b: f64, nu_max: f64, step: f64) -> f64 {
    let n = losses.len();
    let mut nu = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut var_prev = 1.0;
    for i in 0..n {
        nu.push(f64::min(
            nu_max,
            (2.0 * (1.0 / delta).ln() / (n as f64 * var_prev)).sqrt(),
        ));
        sum += losses[i];
        let mu = (0.5 + sum) / (i + 1) as f64;
        sq += (losses[i] - mu) * (losses[i] - mu);
        var_prev = (0.25 + sq) / (i + 1) as f64;
    }
    let mut k = 0;
    loop {
        let eps = k as f64 * step;
        if eps >= b - 1e-12 {
            return b;
        }
        let mut cap = 1.0;
        for i in 0..n {
            cap *= 1.0 - nu[i] * (losses[i] - eps);
            if cap > 1.0 / delta {
                return eps;
            }
        }
        k += 1;
    }
}

/// Traces with stored losses under the name `zo` and no distributions.
pub fn loss_traces(confs: &[Vec<f64>], losses: &[Vec<f64>], bound: f64) -> TraceSet {
    let samples = confs
        .iter()
        .zip(losses)
        .enumerate()
        .map(|(i, (c, l))| ExitTrace {
            id: format!("t{i}"),
            confidences: c.clone(),
            label: None,
            distributions: None,
            losses: Some(BTreeMap::from([("zo".to_string(), l.clone())])),
        })
        .collect();
    let meta = TraceMeta {
        num_exits: losses[0].len(),
        num_classes: None,
        loss_names: vec!["zo".into()],
        loss_bound: bound,
    };
    TraceSet::new(meta, samples).expect("valid traces")
}

#[test]
fn oracles_reproduce_frozen_values() {
    assert!((hb_pvalue(0.0, 100, 0.05) - frozen::HB_ZERO_100_005).abs() < 1e-12);
    assert!((hb_pvalue(0.02, 100, 0.1) - frozen::HB_002_100_01).abs() < 1e-12);
    assert!((hb_pvalue(0.05, 200, 0.1) - frozen::HB_005_200_01).abs() < 1e-12);
    assert_eq!(wsr_bound(&[0.0; 2], 0.1, 1.0, 1.0, 1e-3), 1.0);
    assert!((wsr_bound(&[0.0; 100], 0.1, 1.0, 1.0, 1e-3) - frozen::WSR_ZEROS_100).abs() < 1e-12);
    assert_eq!(exit_index(&[0.2, 0.9], 0.5), 2);
    assert_eq!(exit_index(&[0.2, 0.4], 0.5), 3);
}
