use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TraceSet;
use crate::error::{Error, Result};

/// Random calibration/test index partition of `0..n`.
///
/// The calibration part has `round(cal_fraction * n)` indices. Both parts
/// keep the shuffled order, so downstream sequential procedures see an
/// exchangeable sequence even when the source file is sorted.
pub fn split_indices(n: usize, cal_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    if !(cal_fraction > 0.0 && cal_fraction < 1.0) {
        return Err(Error::Config(format!(
            "calibration fraction must lie in (0, 1), got {cal_fraction}"
        )));
    }
    let n_cal = (cal_fraction * n as f64).round() as usize;
    if n_cal == 0 || n_cal == n {
        return Err(Error::Config(format!(
            "calibration fraction {cal_fraction} leaves an empty part for n = {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = perm.split_off(n_cal);
    Ok((perm, test))
}

/// Splits `ts` into disjoint calibration and test sets.
pub fn split(ts: &TraceSet, cal_fraction: f64, seed: u64) -> Result<(TraceSet, TraceSet)> {
    let (cal, test) = split_indices(ts.len(), cal_fraction, seed)?;
    Ok((ts.select(&cal), ts.select(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_follow_rounded_fraction() {
        let (cal, test) = split_indices(500, 0.8, 0).unwrap();
        assert_eq!((cal.len(), test.len()), (400, 100));
        let (cal, test) = split_indices(7, 0.5, 0).unwrap();
        assert_eq!((cal.len(), test.len()), (4, 3));
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let (mut cal, test) = split_indices(500, 0.8, 3).unwrap();
        cal.extend(test);
        cal.sort_unstable();
        assert_eq!(cal, (0..500).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_partition() {
        assert_eq!(
            split_indices(500, 0.8, 11).unwrap(),
            split_indices(500, 0.8, 11).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let (mut a, _) = split_indices(500, 0.8, 1).unwrap();
        let (mut b, _) = split_indices(500, 0.8, 2).unwrap();
        a.sort_unstable();
        b.sort_unstable();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_parts_are_rejected() {
        assert!(split_indices(10, 0.01, 0).is_err());
        assert!(split_indices(10, 0.99, 0).is_err());
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }
}
