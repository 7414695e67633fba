//! Exact geometric quantile sets on the real line.
//!
//! For a measure on R and a direction `ell` in (-1, 1), the quantile set is
//! the closed interval `[lo, hi]` with `p = (1 + ell) / 2`,
//! `lo = min{a : F(a) >= p}` and `hi = max{a : P(X >= a) >= 1 - p}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{AtomicMeasure, WEIGHT_SUM_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileInterval {
    pub lo: f64,
    pub hi: f64,
    pub unique: bool,
}

impl QuantileInterval {
    pub fn contains(&self, x: f64, slack: f64) -> bool {
        x >= self.lo - slack && x <= self.hi + slack
    }
}

/// Sorted distinct positions with merged weights.
fn merged_support(mu: &AtomicMeasure) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = mu.iter().map(|(x, w)| (x[0], w)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (x, w) in pts {
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 += w,
            _ => out.push((x, w)),
        }
    }
    out
}

fn check(mu: &AtomicMeasure, ell: f64) -> Result<()> {
    if mu.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: mu.dim() });
    }
    if !(ell.abs() < 1.0) {
        return Err(Error::InvalidDirection(ell.abs()));
    }
    Ok(())
}

pub fn univariate_quantile(mu: &AtomicMeasure, ell: f64) -> Result<QuantileInterval> {
    check(mu, ell)?;
    let p = 0.5 * (1.0 + ell);
    let support = merged_support(mu);

    // Lower and upper tails are accumulated separately so neither is
    // computed as `1 - (other)`.
    let mut cdf = 0.0;
    let mut lo = support.last().expect("nonempty measure").0;
    for &(x, w) in &support {
        cdf += w;
        if cdf >= p - WEIGHT_SUM_TOL {
            lo = x;
            break;
        }
    }
    let mut tail = 0.0;
    let mut hi = support[0].0;
    for &(x, w) in support.iter().rev() {
        tail += w;
        if tail >= 1.0 - p - WEIGHT_SUM_TOL {
            hi = x;
            break;
        }
    }
    debug_assert!(lo <= hi);
    Ok(QuantileInterval { lo, hi, unique: lo == hi })
}

pub fn univariate_uniqueness(mu: &AtomicMeasure, ell: f64) -> Result<bool> {
    Ok(univariate_quantile(mu, ell)?.unique)
}

/// Whether the CDF takes the value `p = (1 + ell) / 2` on an interval of
/// positive length, i.e. some atom `a` that is not the largest one has
/// `F(a) = p`. The quantile is unique exactly when this fails.
pub fn cdf_plateau_at_level(mu: &AtomicMeasure, ell: f64) -> Result<bool> {
    check(mu, ell)?;
    let p = 0.5 * (1.0 + ell);
    let support = merged_support(mu);
    let mut cdf = 0.0;
    for &(_, w) in &support[..support.len() - 1] {
        cdf += w;
        if (cdf - p).abs() <= WEIGHT_SUM_TOL {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> AtomicMeasure {
        AtomicMeasure::uniform(xs.iter().map(|x| vec![*x]).collect()).unwrap()
    }

    /// phi for a measure on the line, evaluated directly.
    fn phi1(mu: &AtomicMeasure, ell: f64, a: f64) -> f64 {
        mu.iter().map(|(x, w)| w * ((a - x[0]).abs() - x[0].abs())).sum::<f64>() - ell * a
    }

    /// Grid oracle: the set of grid points within `tol` of the grid minimum.
    fn grid_argmin(mu: &AtomicMeasure, ell: f64, lo: f64, hi: f64, step: f64) -> (f64, f64) {
        let n = ((hi - lo) / step).round() as usize;
        let vals: Vec<(f64, f64)> =
            (0..=n).map(|i| lo + i as f64 * step).map(|a| (a, phi1(mu, ell, a))).collect();
        let min = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let inside: Vec<f64> = vals.iter().filter(|v| v.1 <= min + 1e-12).map(|v| v.0).collect();
        (inside[0], *inside.last().unwrap())
    }

    #[test]
    fn four_points_median_is_flat() {
        let mu = line(&[1.0, 2.0, 3.0, 4.0]);
        let (glo, ghi) = grid_argmin(&mu, 0.0, 0.0, 5.0, 1e-4);
        assert!((glo - 2.0).abs() < 1e-9 && (ghi - 3.0).abs() < 1e-9);
        let q = univariate_quantile(&mu, 0.0).unwrap();
        assert_eq!(q, QuantileInterval { lo: 2.0, hi: 3.0, unique: false });
        assert!(!univariate_uniqueness(&mu, 0.0).unwrap());
        assert!(cdf_plateau_at_level(&mu, 0.0).unwrap());
    }

    #[test]
    fn three_points_median_unique() {
        let mu = line(&[1.0, 2.0, 3.0]);
        let (glo, ghi) = grid_argmin(&mu, 0.0, 0.0, 4.0, 1e-4);
        assert!((glo - 2.0).abs() < 1e-9 && (ghi - 2.0).abs() < 1e-9);
        assert!(univariate_uniqueness(&mu, 0.0).unwrap());
        assert!(!cdf_plateau_at_level(&mu, 0.0).unwrap());
    }

    #[test]
    fn dirac_is_unique() {
        let mu = line(&[-3.5]);
        for ell in [-0.9, 0.0, 0.7] {
            let q = univariate_quantile(&mu, ell).unwrap();
            assert_eq!(q, QuantileInterval { lo: -3.5, hi: -3.5, unique: true });
        }
    }

    #[test]
    fn upper_quartile_of_two_points() {
        let mu = line(&[0.0, 1.0]);
        let (glo, ghi) = grid_argmin(&mu, 0.5, -1.0, 2.0, 1e-4);
        assert!((glo - 1.0).abs() < 1e-9 && (ghi - 1.0).abs() < 1e-9);
        assert_eq!(
            univariate_quantile(&mu, 0.5).unwrap(),
            QuantileInterval { lo: 1.0, hi: 1.0, unique: true }
        );
    }

    #[test]
    fn tied_positions_merge() {
        let mu = line(&[1.0, 1.0, 2.0, 5.0]);
        // F(1) = 0.5 = p, so the median set is [1, 2].
        let q = univariate_quantile(&mu, 0.0).unwrap();
        assert_eq!((q.lo, q.hi), (1.0, 2.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mu = line(&[1.0]);
        assert!(univariate_quantile(&mu, 1.0).is_err());
        let mu2 = AtomicMeasure::dirac(vec![1.0, 2.0]).unwrap();
        assert!(univariate_quantile(&mu2, 0.0).is_err());
    }
}
