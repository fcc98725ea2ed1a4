//! Fixtures shared by the benchmarks.

use eecal_core::risk::LossMatrix;
use eecal_core::{derive_losses, generate, RiskSpec, SynthConfig, TraceSet};

/// Monotone synthetic traces with their 0-1 gap losses.
pub fn fixture(n: usize, seed: u64) -> (TraceSet, LossMatrix) {
    let ts = generate(&SynthConfig::monotone(n, seed)).expect("valid synthetic config");
    let lm = derive_losses(&ts, &RiskSpec::gap_zero_one()).expect("labeled traces");
    (ts, lm)
}

/// Deterministic losses in `[-1, 1]` with mean near 0.3.
pub fn signed_losses(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if (i * 7919) % 20 < 13 { 1.0 } else { -1.0 })
        .collect()
}
