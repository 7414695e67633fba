//! Error bounds for the Taylor expansions of the euclidean norm
//! `N(a) = |a|` and of its gradient `a / |a|`:
//!
//! ```text
//! | N(a+h) - N(a) - <a/|a|, h> - <H(a) h, h>/2 | <= (|h|^2/|a| ∧ |h|^3/|a|^2) / 2
//! | ∇N(a+h) - ∇N(a) - H(a) h |                  <= 2 (|h|/|a| ∧ |h|^2/|a|^2)
//! ```
//!
//! with `H(a) = (I - a a^T / |a|^2) / |a|`. Both constants are attained along
//! the line through `a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{dot, euclidean};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    pub lhs: f64,
    pub bound: f64,
    pub ratio: f64,
}

impl TaylorCheck {
    fn new(lhs: f64, bound: f64) -> Self {
        let ratio = if bound == 0.0 { if lhs == 0.0 { 0.0 } else { f64::INFINITY } } else { lhs / bound };
        Self { lhs, bound, ratio }
    }

    pub fn holds(&self, slack: f64) -> bool {
        self.lhs <= self.bound + slack
    }
}

/// `H(a) h` without forming the matrix.
pub fn hessian_norm_apply(alpha: &[f64], h: &[f64]) -> Vec<f64> {
    let na = euclidean(alpha);
    let c = dot(alpha, h) / (na * na);
    h.iter().zip(alpha).map(|(hk, ak)| (hk - ak * c) / na).collect()
}

fn check_dims(alpha: &[f64], h: &[f64]) -> Result<f64> {
    if alpha.len() != h.len() {
        return Err(Error::DimensionMismatch { expected: alpha.len(), got: h.len() });
    }
    let na = euclidean(alpha);
    if na == 0.0 {
        return Err(Error::Domain("alpha must be nonzero".into()));
    }
    Ok(na)
}

pub fn norm_taylor2_check(alpha: &[f64], h: &[f64]) -> Result<TaylorCheck> {
    let na = check_dims(alpha, h)?;
    let sum: Vec<f64> = alpha.iter().zip(h).map(|(a, b)| a + b).collect();
    let ns = euclidean(&sum);
    let nh = euclidean(h);
    // |a+h| - |a| = (2<a,h> + |h|^2) / (|a+h| + |a|), free of cancellation.
    let increment = (2.0 * dot(alpha, h) + nh * nh) / (ns + na);
    let linear = dot(alpha, h) / na;
    let quad = 0.5 * dot(&hessian_norm_apply(alpha, h), h);
    let lhs = (increment - linear - quad).abs();
    let bound = 0.5 * f64::min(nh * nh / na, nh * nh * nh / (na * na));
    Ok(TaylorCheck::new(lhs, bound))
}

pub fn gradnorm_taylor1_check(alpha: &[f64], h: &[f64]) -> Result<TaylorCheck> {
    let na = check_dims(alpha, h)?;
    let sum: Vec<f64> = alpha.iter().zip(h).map(|(a, b)| a + b).collect();
    let ns = euclidean(&sum);
    if ns == 0.0 {
        return Err(Error::Domain("alpha + h must be nonzero".into()));
    }
    let hh = hessian_norm_apply(alpha, h);
    let resid: Vec<f64> = (0..alpha.len()).map(|k| sum[k] / ns - alpha[k] / na - hh[k]).collect();
    let nh = euclidean(h);
    let bound = 2.0 * f64::min(nh / na, nh * nh / (na * na));
    Ok(TaylorCheck::new(euclidean(&resid), bound))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub ratio_norm2: f64,
    /// NaN at `lambda = -1`, where the gradient bound is undefined.
    pub ratio_grad1: f64,
}

/// Ratios of both inequalities along `h = lambda * a` for a unit vector `a`
/// in R^dim (first basis vector direction rotated to all-ones / sqrt(dim)).
pub fn collinear_sweep(dim: usize, lambdas: &[f64]) -> Vec<SweepRow> {
    assert!(dim >= 1);
    let a = vec![1.0 / (dim as f64).sqrt(); dim];
    lambdas
        .iter()
        .map(|&lambda| {
            let h: Vec<f64> = a.iter().map(|x| lambda * x).collect();
            let r2 = norm_taylor2_check(&a, &h).map(|c| c.ratio).unwrap_or(f64::NAN);
            let r1 = gradnorm_taylor1_check(&a, &h).map(|c| c.ratio).unwrap_or(f64::NAN);
            SweepRow { lambda, ratio_norm2: r2, ratio_grad1: r1 }
        })
        .collect()
}

/// `count` points spaced geometrically between `-1 - near` and `-1 - far`,
/// the regime where the gradient bound is sharp.
pub fn sharpness_lambdas(near: f64, far: f64, count: usize) -> Vec<f64> {
    assert!(near > 0.0 && far > near && count >= 2);
    let (ln, lf) = (near.ln(), far.ln());
    (0..count)
        .map(|i| -1.0 - (ln + (lf - ln) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_bound_attained_at_minus_two() {
        let a = [1.0, 0.0];
        let c = norm_taylor2_check(&a, &[-2.0, 0.0]).unwrap();
        assert!((c.lhs - 2.0).abs() < 1e-15);
        assert_eq!(c.bound, 2.0);
        assert!((c.ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_increment() {
        let a = [0.3, -0.4, 1.2];
        let c = norm_taylor2_check(&a, &[0.0; 3]).unwrap();
        assert_eq!((c.lhs, c.bound, c.ratio), (0.0, 0.0, 0.0));
        let c = gradnorm_taylor1_check(&a, &[0.0; 3]).unwrap();
        assert_eq!((c.lhs, c.bound, c.ratio), (0.0, 0.0, 0.0));
    }

    #[test]
    fn gradient_bound_past_the_origin() {
        let a = [1.0];
        let c = gradnorm_taylor1_check(&a, &[-1.1]).unwrap();
        assert!((c.lhs - 2.0).abs() < 1e-15);
        assert!((c.bound - 2.2).abs() < 1e-15);
        assert!((c.ratio - 2.0 / 2.2).abs() < 1e-14);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(norm_taylor2_check(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(gradnorm_taylor1_check(&[1.0, 0.0], &[-1.0, 0.0]), Err(Error::Domain(_))));
        assert!(norm_taylor2_check(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hessian_apply_matches_matrix() {
        let a = [1.0, 2.0, -2.0];
        let h = [0.5, -1.0, 3.0];
        let na = 3.0;
        let mut want = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                let m = (if i == j { 1.0 } else { 0.0 } - a[i] * a[j] / (na * na)) / na;
                want[i] += m * h[j];
            }
        }
        let got = hessian_norm_apply(&a, &h);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn sweep_approaches_one() {
        let rows = collinear_sweep(1, &sharpness_lambdas(1e-6, 1e-1, 200));
        let sup = rows.iter().map(|r| r.ratio_grad1).fold(0.0, f64::max);
        assert!(sup > 0.999 && sup <= 1.0, "{sup}");
    }
}
