//! Plug-in asymptotic inference for geometric quantiles.
//!
//! At a point `a` with `u_i = (a - x_i)/|a - x_i|` and `r_i = |a - x_i|`:
//!
//! ```text
//! H = sum_{x_i != a} w_i (I - u_i u_i^T) / r_i        curvature of phi
//! V = sum_{x_i != a} w_i (u_i - ell)(u_i - ell)^T     score covariance
//! Sigma = H^-1 V H^-1                                  sandwich covariance
//! ```
//!
//! `sqrt(n) (alpha_hat - alpha_star)` is asymptotically `N(0, Sigma)`, and its
//! linear part is `beta_n = -sqrt(n) H^-1 grad phi_n(alpha_star)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::measure::{dot, euclidean};
use crate::objective::{self, phi, ObjectiveContext};

/// Eigenvalues below this fraction of the largest one make `H` singular.
pub const SINGULAR_REL_TOL: f64 = 1e-12;

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Format("ragged matrix".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Per-atom unit vectors `u_i`, their weights, and `1/r_i`, skipping atoms at `alpha`.
fn directions(ctx: &ObjectiveContext<'_>, alpha: &[f64]) -> Result<(Vec<(Vec<f64>, f64, f64)>, usize)> {
    ctx.require_euclidean()?;
    if alpha.len() != ctx.dim() {
        return Err(Error::DimensionMismatch { expected: ctx.dim(), got: alpha.len() });
    }
    let mut out = Vec::with_capacity(ctx.measure().len());
    let mut excluded = 0;
    for (x, w) in ctx.measure().iter() {
        let diff: Vec<f64> = alpha.iter().zip(x).map(|(a, b)| a - b).collect();
        let r = euclidean(&diff);
        if r == 0.0 {
            excluded += 1;
            continue;
        }
        out.push((diff.iter().map(|d| d / r).collect(), w, 1.0 / r));
    }
    if out.iter().all(|t| t.1 == 0.0) {
        return Err(Error::Degenerate);
    }
    Ok((out, excluded))
}

pub fn estimate_h(ctx: &ObjectiveContext<'_>, alpha: &[f64]) -> Result<DMatrix<f64>> {
    let d = ctx.dim();
    let (dirs, _) = directions(ctx, alpha)?;
    let mut h = DMatrix::zeros(d, d);
    for (u, w, inv_r) in &dirs {
        let s = w * inv_r;
        for i in 0..d {
            h[(i, i)] += s;
            for j in 0..d {
                h[(i, j)] -= s * u[i] * u[j];
            }
        }
    }
    symmetrize(&mut h);
    Ok(h)
}

pub fn estimate_v(ctx: &ObjectiveContext<'_>, alpha: &[f64]) -> Result<DMatrix<f64>> {
    let d = ctx.dim();
    let ell = ctx.ell();
    let (dirs, _) = directions(ctx, alpha)?;
    let mut v = DMatrix::zeros(d, d);
    let mut c = vec![0.0; d];
    for (u, w, _) in &dirs {
        for k in 0..d {
            c[k] = u[k] - ell[k];
        }
        for i in 0..d {
            for j in 0..d {
                v[(i, j)] += w * c[i] * c[j];
            }
        }
    }
    symmetrize(&mut v);
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n_excluded: usize,
    /// `sum_{x_i != a} w_i / |x_i - a|`
    pub moment1: f64,
    /// `sum_{x_i != a} w_i / |x_i - a|^2`
    pub moment2: f64,
}

pub fn inverse_moments(ctx: &ObjectiveContext<'_>, alpha: &[f64]) -> Result<Moments> {
    let (dirs, n_excluded) = directions(ctx, alpha)?;
    let moment1 = dirs.iter().map(|(_, w, ir)| w * ir).sum();
    let moment2 = dirs.iter().map(|(_, w, ir)| w * ir * ir).sum();
    Ok(Moments { n_excluded, moment1, moment2 })
}

/// Symmetric eigendecomposition of `h` with the conditioning verdict.
struct Spectrum {
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    lambda_min: f64,
    lambda_max: f64,
}

impl Spectrum {
    fn new(h: &DMatrix<f64>) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() == 0 {
            return Err(Error::Value("hessian must be a nonempty square matrix".into()));
        }
        let eig = SymmetricEigen::new(h.clone());
        let lambda_min = eig.eigenvalues.min();
        let lambda_max = eig.eigenvalues.max();
        Ok(Self { eig, lambda_min, lambda_max })
    }

    fn invertible(&self) -> bool {
        self.lambda_max > 0.0 && self.lambda_min > SINGULAR_REL_TOL * self.lambda_max
    }

    fn singular(&self) -> Error {
        Error::SingularHessian { lambda_min: self.lambda_min, lambda_max: self.lambda_max }
    }

    /// `H^+ M H^+` in the eigenbasis; eigenvalues under the cutoff are dropped.
    fn sandwich(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let q = &self.eig.eigenvectors;
        let cutoff = SINGULAR_REL_TOL * self.lambda_max.max(0.0);
        let inv: Vec<f64> =
            self.eig.eigenvalues.iter().map(|l| if *l > cutoff { 1.0 / l } else { 0.0 }).collect();
        let mut inner = q.transpose() * m * q;
        for i in 0..inner.nrows() {
            for j in 0..inner.ncols() {
                inner[(i, j)] *= inv[i] * inv[j];
            }
        }
        let mut out = q * inner * q.transpose();
        symmetrize(&mut out);
        out
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let q = &self.eig.eigenvectors;
        let mut c = q.transpose() * b;
        for (ci, l) in c.iter_mut().zip(self.eig.eigenvalues.iter()) {
            *ci /= l;
        }
        q * c
    }
}

/// `H^-1 V H^-1`; fails when `H` is numerically singular.
pub fn sandwich_sigma(h: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let spec = Spectrum::new(h)?;
    if !spec.invertible() {
        return Err(spec.singular());
    }
    Ok(spec.sandwich(v))
}

pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
    pub kappa: f64,
    pub n_excluded: usize,
    pub moment1: f64,
    pub moment2: f64,
    /// Sigma was formed with a pseudo-inverse because H is singular.
    pub pseudo_inverse: bool,
    pub n: usize,
}

impl InferenceReport {
    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.sigma).expect("square by construction")
    }

    pub fn h_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.h).expect("square by construction")
    }
}

/// Plug-in report at `alpha_hat`. Singular curvature does not abort: Sigma
/// falls back to the pseudo-inverse and the report is flagged.
pub fn infer(ctx: &ObjectiveContext<'_>, alpha_hat: &[f64]) -> Result<InferenceReport> {
    let h = estimate_h(ctx, alpha_hat)?;
    let v = estimate_v(ctx, alpha_hat)?;
    let moments = inverse_moments(ctx, alpha_hat)?;
    let spec = Spectrum::new(&h)?;
    let sigma = spec.sandwich(&v);
    Ok(InferenceReport {
        h: to_rows(&h),
        v: to_rows(&v),
        sigma: to_rows(&sigma),
        kappa: spec.lambda_min.max(0.0),
        n_excluded: moments.n_excluded,
        moment1: moments.moment1,
        moment2: moments.moment2,
        pseudo_inverse: !spec.invertible(),
        n: ctx.measure().len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianSource {
    Population,
    PlugIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaHat {
    pub beta: Vec<f64>,
    pub hessian: HessianSource,
}

/// `beta_n = -sqrt(n) H^-1 grad phi_n(alpha_star)` with `n` the number of
/// atoms of the sample. `population_h` is used when given; otherwise the
/// plug-in `H` at `alpha_star`.
pub fn beta_hat(
    sample: &ObjectiveContext<'_>,
    alpha_star: &[f64],
    population_h: Option<&DMatrix<f64>>,
) -> Result<BetaHat> {
    let (h, source) = match population_h {
        Some(h) => (h.clone(), HessianSource::Population),
        None => (estimate_h(sample, alpha_star)?, HessianSource::PlugIn),
    };
    if h.nrows() != sample.dim() {
        return Err(Error::DimensionMismatch { expected: sample.dim(), got: h.nrows() });
    }
    let g = objective::subgradient(sample, alpha_star)?.subgradient;
    let beta = beta_from_score(&h, &g, sample.measure().len())?;
    Ok(BetaHat { beta, hessian: source })
}

/// Solves `H beta = -sqrt(n) g`.
pub fn beta_from_score(h: &DMatrix<f64>, score: &[f64], n: usize) -> Result<Vec<f64>> {
    let spec = Spectrum::new(h)?;
    if !spec.invertible() {
        return Err(spec.singular());
    }
    let rhs = DVector::from_iterator(score.len(), score.iter().map(|g| -(n as f64).sqrt() * g));
    Ok(spec.solve(&rhs).iter().copied().collect())
}

/// `Psi_n(beta) = phi_n(a) + <grad, beta/sqrt(n)> + <H beta/sqrt(n), beta/sqrt(n)>/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticSurrogate {
    pub anchor: Vec<f64>,
    pub value0: f64,
    pub grad: Vec<f64>,
    pub h: DMatrix<f64>,
    pub n: usize,
}

impl QuadraticSurrogate {
    pub fn new(sample: &ObjectiveContext<'_>, anchor: &[f64], h: DMatrix<f64>) -> Result<Self> {
        let sg = objective::subgradient(sample, anchor)?;
        if h.nrows() != anchor.len() || h.ncols() != anchor.len() {
            return Err(Error::DimensionMismatch { expected: anchor.len(), got: h.nrows() });
        }
        Ok(Self {
            anchor: anchor.to_vec(),
            value0: sg.value,
            grad: sg.subgradient,
            h,
            n: sample.measure().len(),
        })
    }

    /// Minimizer of the surrogate.
    pub fn minimizer(&self) -> Result<Vec<f64>> {
        beta_from_score(&self.h, &self.grad, self.n)
    }
}

pub fn surrogate_eval(s: &QuadraticSurrogate, beta: &[f64]) -> Result<f64> {
    if beta.len() != s.anchor.len() {
        return Err(Error::DimensionMismatch { expected: s.anchor.len(), got: beta.len() });
    }
    let scale = 1.0 / (s.n as f64).sqrt();
    let b = DVector::from_iterator(beta.len(), beta.iter().map(|x| x * scale));
    let linear = dot(&s.grad, b.as_slice());
    let quad = 0.5 * b.dot(&(&s.h * &b));
    Ok(s.value0 + linear + quad)
}

/// `psi_n(beta) = phi_n(anchor + beta / sqrt(n))`.
pub fn rescaled_objective(sample: &ObjectiveContext<'_>, anchor: &[f64], n: usize, beta: &[f64]) -> f64 {
    let scale = 1.0 / (n as f64).sqrt();
    let a: Vec<f64> = anchor.iter().zip(beta).map(|(a, b)| a + b * scale).collect();
    phi(sample, &a)
}

/// `sup |psi_n - Psi_n|` over deterministic probes in `B(0, radius)`.
pub fn surrogate_gap(sample: &ObjectiveContext<'_>, s: &QuadraticSurrogate, radius: f64, probes: usize, seed: u64) -> Result<f64> {
    let pts = objective::ball_probes(s.anchor.len(), radius, probes, seed);
    let mut worst: f64 = 0.0;
    for b in &pts {
        let diff = (rescaled_objective(sample, &s.anchor, s.n, b) - surrogate_eval(s, b)?).abs();
        worst = worst.max(diff);
    }
    Ok(worst)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Wald interval for `<f, alpha_star>`: `<f, alpha_hat> ± z sqrt(f^T Sigma f / n)`.
pub fn confint_functional(
    report: &InferenceReport,
    alpha_hat: &[f64],
    f: &[f64],
    n: usize,
    level: f64,
) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Value(format!("level {level} outside (0, 1)")));
    }
    if f.len() != alpha_hat.len() || report.sigma.len() != f.len() {
        return Err(Error::DimensionMismatch { expected: alpha_hat.len(), got: f.len() });
    }
    if n == 0 {
        return Err(Error::Value("sample size must be positive".into()));
    }
    if report.pseudo_inverse || !(report.kappa > 0.0) {
        return Err(Spectrum::new(&report.h_matrix())?.singular());
    }
    let sigma = report.sigma_matrix();
    let fv = DVector::from_column_slice(f);
    let var = fv.dot(&(&sigma * &fv)).max(0.0);
    let center = dot(f, alpha_hat);
    let half = normal_quantile(0.5 * (1.0 + level)) * (var / n as f64).sqrt();
    Ok((center - half, center + half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{AtomicMeasure, QuantileDirection};

    fn cross() -> AtomicMeasure {
        AtomicMeasure::uniform(vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap()
    }

    fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        assert!((a - b).norm() <= tol, "{a} vs {b}");
    }

    #[test]
    fn cross_fixture_h_v_sigma() {
        let mu = cross();
        let ctx = ObjectiveContext::median(&mu);
        let h = estimate_h(&ctx, &[0.0, 0.0]).unwrap();
        let v = estimate_v(&ctx, &[0.0, 0.0]).unwrap();
        assert_close(&h, &(DMatrix::identity(2, 2) * 0.5), 1e-15);
        assert_close(&v, &(DMatrix::identity(2, 2) * 0.5), 1e-15);
        let s = sandwich_sigma(&h, &v).unwrap();
        assert_close(&s, &(DMatrix::identity(2, 2) * 2.0), 1e-12);
    }

    #[test]
    fn one_dimensional_hessian_vanishes() {
        let mu = AtomicMeasure::uniform(vec![vec![-1.0], vec![2.0], vec![3.0]]).unwrap();
        let ctx = ObjectiveContext::median(&mu);
        let h = estimate_h(&ctx, &[0.5]).unwrap();
        assert_eq!(h[(0, 0)], 0.0);
        let rep = infer(&ctx, &[0.5]).unwrap();
        assert_eq!(rep.kappa, 0.0);
        assert!(rep.pseudo_inverse);
        assert!(matches!(
            confint_functional(&rep, &[0.5], &[1.0], 3, 0.95),
            Err(Error::SingularHessian { .. })
        ));
    }

    #[test]
    fn all_atoms_at_point_is_degenerate() {
        let mu = AtomicMeasure::uniform(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ctx = ObjectiveContext::median(&mu);
        assert!(matches!(estimate_h(&ctx, &[1.0, 1.0]), Err(Error::Degenerate)));
        assert!(matches!(estimate_v(&ctx, &[1.0, 1.0]), Err(Error::Degenerate)));
    }

    #[test]
    fn v_vanishes_when_scores_equal_ell() {
        // Atoms on a ray from alpha all share u = (-1, 0); take ell = u.
        let mu = AtomicMeasure::uniform(vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![5.0, 0.0]]).unwrap();
        let ell = QuantileDirection::new(vec![-0.999_999, 0.0]).unwrap();
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        let v = estimate_v(&ctx, &[0.0, 0.0]).unwrap();
        assert!(v.norm() < 1e-11);
    }

    #[test]
    fn collinear_atoms_on_axis() {
        let mu = AtomicMeasure::uniform(vec![vec![-2.0, 0.0], vec![2.0, 0.0], vec![-2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let ctx = ObjectiveContext::median(&mu);
        let a = [0.5, 0.0];
        let h = estimate_h(&ctx, &a).unwrap();
        let m = inverse_moments(&ctx, &a).unwrap();
        assert_eq!(h[(0, 0)], 0.0);
        assert_eq!(h[(0, 1)], 0.0);
        assert!((h[(1, 1)] - m.moment1).abs() < 1e-15);
        assert_eq!(smallest_eigenvalue(&h), 0.0);
    }

    #[test]
    fn sandwich_identity_and_zero() {
        let h = DMatrix::identity(3, 3);
        let z = DMatrix::zeros(3, 3);
        assert_eq!(sandwich_sigma(&h, &z).unwrap(), z);
        assert!(matches!(sandwich_sigma(&DMatrix::zeros(2, 2), &z), Err(Error::SingularHessian { .. })));
    }

    #[test]
    fn beta_zero_for_symmetric_fixture() {
        let mu = cross();
        let ctx = ObjectiveContext::median(&mu);
        let b = beta_hat(&ctx, &[0.0, 0.0], None).unwrap();
        assert_eq!(b.hessian, HessianSource::PlugIn);
        assert!(b.beta.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn surrogate_at_zero_and_minimizer() {
        let mu = AtomicMeasure::uniform(vec![vec![0.0, 0.0], vec![3.0, 1.0], vec![-1.0, 2.0], vec![1.0, -2.0]]).unwrap();
        let ctx = ObjectiveContext::median(&mu);
        let anchor = [0.3, 0.4];
        let h = estimate_h(&ctx, &anchor).unwrap();
        let kappa = smallest_eigenvalue(&h);
        let s = QuadraticSurrogate::new(&ctx, &anchor, h).unwrap();
        assert_eq!(surrogate_eval(&s, &[0.0, 0.0]).unwrap(), s.value0);
        let bmin = s.minimizer().unwrap();
        let fmin = surrogate_eval(&s, &bmin).unwrap();
        for t in [-1.0, -0.1, 0.1, 2.0] {
            let b = [bmin[0] + t, bmin[1]];
            let f = surrogate_eval(&s, &b).unwrap();
            assert!(f > fmin);
            assert!(f >= fmin + kappa / (2.0 * s.n as f64) * t * t - 1e-15);
        }
    }

    #[test]
    fn confidence_interval_half_width() {
        let rep = InferenceReport {
            h: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            v: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            sigma: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            kappa: 0.5,
            n_excluded: 0,
            moment1: 1.0,
            moment2: 1.0,
            pseudo_inverse: false,
            n: 100,
        };
        let (lo, hi) = confint_functional(&rep, &[0.1, 0.2], &[1.0, 0.0], 100, 0.95).unwrap();
        assert!(((hi - lo) / 2.0 - 1.959_963_984_540_054 * (0.02f64).sqrt()).abs() < 1e-8);
        assert!((((hi - lo) / 2.0) - 0.27719).abs() < 1e-5);
        assert!(((lo + hi) / 2.0 - 0.1).abs() < 1e-15);
        let (lo, hi) = confint_functional(&rep, &[0.1, 0.2], &[0.0, 0.0], 100, 0.95).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        assert!(confint_functional(&rep, &[0.1, 0.2], &[1.0, 0.0], 100, 1.0).is_err());
    }

    #[test]
    fn normal_quantile_accuracy() {
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-8);
        assert!((normal_quantile(0.5)).abs() < 1e-12);
        assert!((normal_cdf(normal_quantile(0.9)) - 0.9).abs() < 1e-10);
    }
}
