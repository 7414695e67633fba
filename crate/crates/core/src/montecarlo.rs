//! Seeded replication experiments: consistency, asymptotic normality,
//! Bahadur remainder rates and Wald-interval coverage.
//!
//! Every replication draws from its own ChaCha stream keyed by
//! `(seed, n, replication)`, so reports do not depend on how replications are
//! spread over threads. Population quantities (the true quantile, `H`, `V`,
//! `Sigma`) come from a dense atomic approximation of the distribution built
//! once per experiment: a polar Gauss-Legendre rule for 2-D gaussians and
//! mixtures, the atoms themselves for discrete distributions, and a large
//! seeded sample otherwise.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, normal_cdf, to_rows};
use crate::measure::{euclidean, AtomicMeasure, QuantileDirection};
use crate::objective::{self, ObjectiveContext};
use crate::optimizer::{self, Init, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Identity,
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Covariance {
    fn matrix(&self, dim: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            Covariance::Identity => DMatrix::identity(dim, dim),
            Covariance::Diagonal(d) => {
                if d.len() != dim {
                    return Err(Error::Config(format!("diagonal has {} entries for dimension {dim}", d.len())));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(d))
            }
            Covariance::Full(rows) => {
                let m = inference::from_rows(rows).map_err(|e| Error::Config(e.to_string()))?;
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(Error::Config(format!("covariance must be {dim}x{dim}")));
                }
                if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
                    return Err(Error::Config("covariance is not symmetric".into()));
                }
                m
            }
        };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("covariance has non-finite entries".into()));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Covariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Distribution {
    Gaussian { mean: Vec<f64>, covariance: Covariance },
    Mixture { components: Vec<MixtureComponent> },
    UniformAtoms { atoms: Vec<Vec<f64>> },
    /// Coordinates `z_k ~ N(0, k^(-2 decay))`, `k = 1..=dim`: a truncated
    /// Karhunen-Loeve expansion of a random function.
    TruncatedKl { decay: f64, dim: usize },
}

impl Distribution {
    pub fn standard_gaussian(dim: usize) -> Self {
        Distribution::Gaussian { mean: vec![0.0; dim], covariance: Covariance::Identity }
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian { mean, .. } => mean.len(),
            Distribution::Mixture { components } => components.first().map_or(0, |c| c.mean.len()),
            Distribution::UniformAtoms { atoms } => atoms.first().map_or(0, Vec::len),
            Distribution::TruncatedKl { dim, .. } => *dim,
        }
    }

    /// Validates the specification and precomputes what sampling needs.
    pub fn sampler(&self) -> Result<Sampler> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::Config("distribution has dimension 0".into()));
        }
        let gaussian = |mean: &[f64], cov: &Covariance| -> Result<GaussianParts> {
            if mean.len() != dim || mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config("mean has the wrong length or non-finite entries".into()));
            }
            let sigma = cov.matrix(dim)?;
            let chol = Cholesky::new(sigma)
                .ok_or_else(|| Error::Config("covariance is not positive definite".into()))?;
            Ok(GaussianParts { mean: mean.to_vec(), chol })
        };
        let kind = match self {
            Distribution::Gaussian { mean, covariance } => SamplerKind::Mixture(vec![(1.0, gaussian(mean, covariance)?)]),
            Distribution::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::Config("mixture without components".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| !(c.weight >= 0.0)) || !(total > 0.0) {
                    return Err(Error::Config("mixture weights must be nonnegative with positive sum".into()));
                }
                let mut parts = Vec::with_capacity(components.len());
                for c in components {
                    parts.push((c.weight / total, gaussian(&c.mean, &c.covariance)?));
                }
                SamplerKind::Mixture(parts)
            }
            Distribution::UniformAtoms { atoms } => {
                AtomicMeasure::uniform(atoms.clone()).map_err(|e| Error::Config(e.to_string()))?;
                SamplerKind::Atoms(atoms.clone())
            }
            Distribution::TruncatedKl { decay, dim } => {
                if !decay.is_finite() || *decay < 0.0 {
                    return Err(Error::Config("decay exponent must be finite and nonnegative".into()));
                }
                SamplerKind::Kl((1..=*dim).map(|k| (k as f64).powf(-decay)).collect())
            }
        };
        Ok(Sampler { dim, kind })
    }

    /// Center of central symmetry, when the distribution is known to have one.
    pub fn symmetry_center(&self) -> Option<Vec<f64>> {
        match self {
            Distribution::Gaussian { mean, .. } => Some(mean.clone()),
            Distribution::TruncatedKl { dim, .. } => Some(vec![0.0; *dim]),
            Distribution::Mixture { components } if components.len() == 1 => Some(components[0].mean.clone()),
            Distribution::Mixture { .. } => None,
            Distribution::UniformAtoms { atoms } => {
                let mu = AtomicMeasure::uniform(atoms.clone()).ok()?;
                let c = mu.mean();
                let key = |p: &[f64]| -> Vec<u64> { p.iter().map(|x| (x + 0.0).to_bits()).collect() };
                let mut fwd: Vec<Vec<u64>> = atoms.iter().map(|a| key(a)).collect();
                let mut refl: Vec<Vec<u64>> = atoms
                    .iter()
                    .map(|a| key(&a.iter().zip(&c).map(|(x, ck)| 2.0 * ck - x).collect::<Vec<_>>()))
                    .collect();
                fwd.sort();
                refl.sort();
                (fwd == refl).then_some(c)
            }
        }
    }
}

struct GaussianParts {
    mean: Vec<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl GaussianParts {
    fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = self.chol.l() * z;
        x.iter().zip(&self.mean).map(|(a, m)| a + m).collect()
    }

    fn density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let q = DVector::from_iterator(d, x.iter().zip(&self.mean).map(|(a, m)| a - m));
        let l = self.chol.l();
        let y = l.solve_lower_triangular(&q).expect("cholesky factor is invertible");
        let log_det: f64 = l.diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        (-0.5 * y.norm_squared() - 0.5 * log_det - 0.5 * d as f64 * (2.0 * PI).ln()).exp()
    }
}

enum SamplerKind {
    Mixture(Vec<(f64, GaussianParts)>),
    Atoms(Vec<Vec<f64>>),
    Kl(Vec<f64>),
}

pub struct Sampler {
    dim: usize,
    kind: SamplerKind,
}

impl Sampler {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        match &self.kind {
            SamplerKind::Mixture(parts) => {
                let mut u: f64 = rng.random();
                let mut chosen = &parts[parts.len() - 1].1;
                for (w, p) in parts {
                    if u < *w {
                        chosen = p;
                        break;
                    }
                    u -= w;
                }
                chosen.draw(rng)
            }
            SamplerKind::Atoms(atoms) => atoms[rng.random_range(0..atoms.len())].clone(),
            SamplerKind::Kl(sd) => sd.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    /// `n` i.i.d. draws as an empirical measure.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<AtomicMeasure> {
        if n == 0 {
            return Err(Error::Config("sample size must be positive".into()));
        }
        AtomicMeasure::uniform((0..n).map(|_| self.draw(rng)).collect())
    }

    fn density(&self, x: &[f64]) -> Option<f64> {
        match &self.kind {
            SamplerKind::Mixture(parts) => Some(parts.iter().map(|(w, p)| w * p.density(x)).sum()),
            _ => None,
        }
    }
}

/// `n` i.i.d. draws from `dist` with uniform weights.
pub fn sample(dist: &Distribution, n: usize, rng: &mut impl Rng) -> Result<AtomicMeasure> {
    dist.sampler()?.sample(n, rng)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream used by replication `rep` at sample size `n`.
pub fn replication_seed(seed: u64, n: usize, rep: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ n as u64) ^ rep as u64)
}

/// Seed reserved for building the population approximation.
fn population_seed(seed: u64) -> u64 {
    splitmix(seed ^ 0x5EED_F00D_u64)
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    let n = order;
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut x = (PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

pub const POLAR_PANELS: usize = 64;
pub const POLAR_ORDER: usize = 16;
pub const POLAR_ANGLES: usize = 256;

/// Polar product rule around `center` for a 2-D density: atoms at
/// `center + r (cos t, sin t)` with mass `p(x) r dr dt`. The `1/r` in the
/// curvature integrand cancels the polar Jacobian, so `H` and `V` at the
/// center are integrals of smooth functions and converge spectrally.
fn polar_quadrature(sampler: &Sampler, center: &[f64], r_max: f64) -> Result<AtomicMeasure> {
    let gl = gauss_legendre(POLAR_ORDER);
    let panel = r_max / POLAR_PANELS as f64;
    let dt = 2.0 * PI / POLAR_ANGLES as f64;
    let mut atoms = Vec::with_capacity(POLAR_PANELS * POLAR_ORDER * POLAR_ANGLES);
    let mut masses = Vec::with_capacity(atoms.capacity());
    for k in 0..POLAR_PANELS {
        for (node, w) in &gl {
            let r = panel * (k as f64 + 0.5 * (node + 1.0));
            let wr = 0.5 * panel * w * r * dt;
            for j in 0..POLAR_ANGLES {
                let t = dt * (j as f64 + 0.5);
                let x = vec![center[0] + r * t.cos(), center[1] + r * t.sin()];
                let p = sampler.density(&x).expect("density available");
                atoms.push(x);
                masses.push(p * wr);
            }
        }
    }
    AtomicMeasure::from_masses(atoms, masses)
}

fn polar_radius(dist: &Distribution, center: &[f64]) -> Result<f64> {
    let parts: Vec<(&Vec<f64>, &Covariance)> = match dist {
        Distribution::Gaussian { mean, covariance } => vec![(mean, covariance)],
        Distribution::Mixture { components } => components.iter().map(|c| (&c.mean, &c.covariance)).collect(),
        _ => return Err(Error::Config("polar rule needs a gaussian or mixture".into())),
    };
    let mut r: f64 = 0.0;
    for (mean, cov) in parts {
        let m = cov.matrix(mean.len())?;
        let lmax = SymmetricEigen::new(m).eigenvalues.max();
        let off: Vec<f64> = mean.iter().zip(center).map(|(a, b)| a - b).collect();
        r = r.max(euclidean(&off) + 12.0 * lmax.sqrt());
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproximationKind {
    PolarQuadrature,
    Exact,
    Sample,
}

/// Dense atomic stand-in for a distribution, centered at `center` when the
/// rule depends on a center.
pub fn dense_approximation(
    dist: &Distribution,
    center: &[f64],
    sample_size: usize,
    seed: u64,
) -> Result<(AtomicMeasure, ApproximationKind)> {
    let sampler = dist.sampler()?;
    match dist {
        Distribution::UniformAtoms { atoms } => Ok((AtomicMeasure::uniform(atoms.clone())?, ApproximationKind::Exact)),
        Distribution::Gaussian { .. } | Distribution::Mixture { .. } if sampler.dim() == 2 => {
            let r = polar_radius(dist, center)?;
            Ok((polar_quadrature(&sampler, center, r)?, ApproximationKind::PolarQuadrature))
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(population_seed(seed));
            Ok((sampler.sample(sample_size.max(1), &mut rng)?, ApproximationKind::Sample))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    Symmetry,
    DenseSolve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueQuantile {
    pub alpha_star: Vec<f64>,
    pub method: TruthMethod,
    /// Certified gap of the dense solve; 0 for symmetry.
    pub epsilon_certified: f64,
}

fn dense_solver() -> SolverConfig {
    SolverConfig { grad_tol: 1e-12, record_trace: false, ..Default::default() }
}

/// The population quantile: the symmetry center for `ell = 0` and a
/// centrally symmetric distribution, otherwise a tight solve on `dense`.
pub fn true_quantile(dist: &Distribution, ell: &QuantileDirection, dense: Option<&AtomicMeasure>) -> Result<TrueQuantile> {
    if ell.dim() != dist.dim() {
        return Err(Error::Config(format!("direction has dimension {} for a {}-dimensional distribution", ell.dim(), dist.dim())));
    }
    if ell.magnitude() == 0.0 {
        if let Some(c) = dist.symmetry_center() {
            return Ok(TrueQuantile { alpha_star: c, method: TruthMethod::Symmetry, epsilon_certified: 0.0 });
        }
    }
    let dense = dense.ok_or_else(|| Error::Config("asymmetric case needs a dense approximation".into()))?;
    let ctx = ObjectiveContext::new(dense, ell.clone())?;
    let sol = optimizer::solve(&ctx, &dense_solver())?;
    Ok(TrueQuantile { alpha_star: sol.alpha_hat, method: TruthMethod::DenseSolve, epsilon_certified: sol.epsilon_certified })
}

/// Population objects at the true quantile, cached for one experiment.
pub struct Population {
    pub truth: TrueQuantile,
    pub approximation: ApproximationKind,
    pub atoms: usize,
    /// `H`, `V`, `Sigma`; absent when `H` cannot be formed (e.g. a Dirac mass).
    pub curvature: Option<Curvature>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curvature {
    pub h: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Absent when `H` is singular.
    pub sigma: Option<DMatrix<f64>>,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub alpha_star: Vec<f64>,
    pub method: TruthMethod,
    pub epsilon_certified: f64,
    pub approximation: ApproximationKind,
    pub atoms: usize,
    #[serde(rename = "H")]
    pub h: Option<Vec<Vec<f64>>>,
    #[serde(rename = "V")]
    pub v: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Sigma")]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub kappa: Option<f64>,
}

impl Population {
    pub fn build(dist: &Distribution, ell: &QuantileDirection, sample_size: usize, seed: u64) -> Result<Self> {
        let center0 = dist.symmetry_center().unwrap_or_else(|| match dist {
            Distribution::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                (0..dist.dim())
                    .map(|k| components.iter().map(|c| c.weight * c.mean[k]).sum::<f64>() / total)
                    .collect()
            }
            _ => vec![0.0; dist.dim()],
        });
        let (mut dense, kind) = dense_approximation(dist, &center0, sample_size, seed)?;
        let mut truth = true_quantile(dist, ell, Some(&dense))?;
        if kind == ApproximationKind::PolarQuadrature && truth.method == TruthMethod::DenseSolve {
            // Recenter the rule at the quantile so the curvature integrand is smooth there.
            dense = dense_approximation(dist, &truth.alpha_star, sample_size, seed)?.0;
            let ctx = ObjectiveContext::new(&dense, ell.clone())?;
            let cfg = SolverConfig { init: Init::Point(truth.alpha_star.clone()), ..dense_solver() };
            let sol = optimizer::solve(&ctx, &cfg)?;
            truth.alpha_star = sol.alpha_hat;
            truth.epsilon_certified = sol.epsilon_certified;
        }
        let ctx = ObjectiveContext::new(&dense, ell.clone())?;
        let curvature = match (inference::estimate_h(&ctx, &truth.alpha_star), inference::estimate_v(&ctx, &truth.alpha_star)) {
            (Ok(h), Ok(v)) => {
                let sigma = inference::sandwich_sigma(&h, &v).ok();
                let kappa = inference::smallest_eigenvalue(&h);
                Some(Curvature { h, v, sigma, kappa })
            }
            (Err(Error::Degenerate), _) | (_, Err(Error::Degenerate)) => None,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        Ok(Self { truth, approximation: kind, atoms: dense.len(), curvature })
    }

    pub fn summary(&self) -> PopulationSummary {
        let c = self.curvature.as_ref();
        PopulationSummary {
            alpha_star: self.truth.alpha_star.clone(),
            method: self.truth.method,
            epsilon_certified: self.truth.epsilon_certified,
            approximation: self.approximation,
            atoms: self.atoms,
            h: c.map(|c| to_rows(&c.h)),
            v: c.map(|c| to_rows(&c.v)),
            sigma: c.and_then(|c| c.sigma.as_ref().map(to_rows)),
            kappa: c.map(|c| c.kappa),
        }
    }

    fn require_sigma(&self) -> Result<(&DMatrix<f64>, &DMatrix<f64>)> {
        let c = self
            .curvature
            .as_ref()
            .ok_or_else(|| Error::Config("population curvature is undefined for this distribution".into()))?;
        match &c.sigma {
            Some(s) => Ok((&c.h, s)),
            None => Err(Error::SingularHessian { lambda_min: c.kappa, lambda_max: inference::smallest_eigenvalue(&(-&c.h)).abs() }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonSchedule {
    /// Solve to gradient norm 1e-12.
    #[default]
    Exact,
    /// `c n^-1.5`, a concrete `o(1/n)`.
    OInvN,
    /// `c n^-2`, a concrete `o(n^-3/2)`.
    OInvN32,
    /// `c n^-2.5`, a concrete `o(n^-2)`.
    OInvN2,
}

pub const EXACT_GRAD_TOL: f64 = 1e-12;

impl EpsilonSchedule {
    pub fn target(&self, n: usize, constant: f64) -> Option<f64> {
        let n = n as f64;
        match self {
            EpsilonSchedule::Exact => None,
            EpsilonSchedule::OInvN => Some(constant * n.powf(-1.5)),
            EpsilonSchedule::OInvN32 => Some(constant * n.powi(-2)),
            EpsilonSchedule::OInvN2 => Some(constant * n.powf(-2.5)),
        }
    }

    pub fn solver(&self, n: usize, constant: f64) -> SolverConfig {
        match self.target(n, constant) {
            None => SolverConfig { grad_tol: EXACT_GRAD_TOL, record_trace: false, ..Default::default() },
            Some(t) => SolverConfig { grad_tol: 1e-15, target_epsilon: Some(t), record_trace: false, ..Default::default() },
        }
    }

    /// Whether a returned solution satisfies the schedule at size `n`.
    pub fn satisfied(&self, sol: &optimizer::QuantileSolution, n: usize, constant: f64) -> bool {
        match self.target(n, constant) {
            None => sol.converged && sol.subgrad_norm <= EXACT_GRAD_TOL,
            Some(t) => sol.epsilon_certified <= t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Normality,
    Bahadur,
    Consistency,
    Coverage,
}

fn default_constant() -> f64 {
    1.0
}
fn default_population_atoms() -> usize {
    200_000
}
fn default_level() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentKind,
    pub distribution: Distribution,
    pub ell: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub epsilon_schedule: EpsilonSchedule,
    #[serde(default = "default_constant")]
    pub epsilon_constant: f64,
    /// Size of the sampled population approximation, when one is needed.
    #[serde(default = "default_population_atoms")]
    pub population_atoms: usize,
    /// Confidence level for coverage experiments.
    #[serde(default = "default_level")]
    pub level: f64,
    /// Functional `f` for coverage of `<f, alpha_star>`; defaults to `e_1`.
    #[serde(default)]
    pub functional: Option<Vec<f64>>,
    /// Keep per-replication rows in the report.
    #[serde(default)]
    pub keep_rows: bool,
}

impl ExperimentConfig {
    pub fn new(distribution: Distribution, ell: Vec<f64>, n_grid: Vec<usize>, replications: usize, seed: u64) -> Self {
        Self {
            experiment: ExperimentKind::default(),
            distribution,
            ell,
            n_grid,
            replications,
            seed,
            epsilon_schedule: EpsilonSchedule::Exact,
            epsilon_constant: 1.0,
            population_atoms: default_population_atoms(),
            level: default_level(),
            functional: None,
            keep_rows: false,
        }
    }

    pub fn validate(&self) -> Result<QuantileDirection> {
        if self.n_grid.is_empty() {
            return Err(Error::Config("n_grid is empty".into()));
        }
        if self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_grid must be positive and strictly increasing".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !(self.epsilon_constant > 0.0) {
            return Err(Error::Config("epsilon_constant must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config("level must lie in (0, 1)".into()));
        }
        self.distribution.sampler()?;
        if self.ell.len() != self.distribution.dim() {
            return Err(Error::Config(format!(
                "ell has dimension {} but the distribution has dimension {}",
                self.ell.len(),
                self.distribution.dim()
            )));
        }
        if let Some(f) = &self.functional {
            if f.len() != self.ell.len() {
                return Err(Error::Config("functional has the wrong dimension".into()));
            }
        }
        QuantileDirection::new(self.ell.clone()).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Outcome of one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub n: usize,
    pub replication: usize,
    pub alpha_hat: Vec<f64>,
    /// `sqrt(n) (alpha_hat - alpha_star)`.
    pub scaled_error: Vec<f64>,
    pub error_norm: f64,
    pub epsilon_certified: f64,
    pub schedule_satisfied: bool,
    pub remainder: Option<f64>,
    pub covered: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct PerSize {
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub schedule_violations: usize,
    pub median_consistency_error: Option<f64>,
    pub empirical_covariance: Option<Vec<Vec<f64>>>,
    pub population_sigma: Option<Vec<Vec<f64>>>,
    pub relative_frobenius_error: Option<f64>,
    pub ks_statistics: Option<Vec<f64>>,
    pub median_remainder: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub population: PopulationSummary,
    pub per_n: Vec<PerSize>,
    /// Least-squares slope of log median remainder against log n.
    pub remainder_slope: Option<f64>,
    /// Least-squares slope of log median `|alpha_hat - alpha_star|` against log n.
    pub consistency_slope: Option<f64>,
    /// Number of successive medians that failed to decrease.
    pub consistency_increases: Option<usize>,
    /// At most one increase among the consistency medians.
    pub consistency_decreasing: Option<bool>,
    /// Fewer than two successful replications at some size: covariances undefined.
    pub insufficient_replications: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rows: Option<Vec<ReplicationRow>>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    Some(if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
}

/// Least-squares slope of `ln y` against `ln x`; `None` if any `y <= 0` or fewer than two points.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || y.iter().chain(x).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Some(sxy / sxx)
}

/// Unbiased sample covariance of the rows of `data`.
pub fn sample_covariance(data: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let m = data.len();
    if m < 2 {
        return None;
    }
    let d = data[0].len();
    let mut mean = vec![0.0; d];
    for row in data {
        for k in 0..d {
            mean[k] += row[k] / m as f64;
        }
    }
    let mut c = DMatrix::zeros(d, d);
    for row in data {
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    Some(c / (m - 1) as f64)
}

/// Kolmogorov-Smirnov distance between the empirical law of `values` and N(0, 1).
pub fn ks_statistic_normal(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal_cdf(*x);
            f64::max((i + 1) as f64 / m - f, f - i as f64 / m)
        })
        .fold(0.0, f64::max)
}

/// `|sqrt(n)(alpha_hat - alpha_star) - beta_n|` with `beta_n` built from the
/// population curvature.
pub fn bahadur_remainder(
    sample: &ObjectiveContext<'_>,
    alpha_hat: &[f64],
    alpha_star: &[f64],
    population_h: &DMatrix<f64>,
) -> Result<f64> {
    let n = sample.measure().len();
    let beta = inference::beta_hat(sample, alpha_star, Some(population_h))?.beta;
    let rn = (n as f64).sqrt();
    let diff: Vec<f64> = alpha_hat.iter().zip(alpha_star).zip(&beta).map(|((a, s), b)| rn * (a - s) - b).collect();
    Ok(euclidean(&diff))
}

#[derive(Clone, Copy)]
struct Needs {
    remainder: bool,
    coverage: bool,
}

fn run_one(
    cfg: &ExperimentConfig,
    sampler: &Sampler,
    ell: &QuantileDirection,
    pop: &Population,
    n: usize,
    rep: usize,
    needs: Needs,
) -> Result<ReplicationRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(cfg.seed, n, rep));
    let mu = sampler.sample(n, &mut rng)?;
    let ctx = ObjectiveContext::new(&mu, ell.clone())?;
    let solver = cfg.epsilon_schedule.solver(n, cfg.epsilon_constant);
    let sol = optimizer::solve(&ctx, &solver)?;
    let star = &pop.truth.alpha_star;
    let rn = (n as f64).sqrt();
    let diff: Vec<f64> = sol.alpha_hat.iter().zip(star).map(|(a, s)| a - s).collect();
    let remainder = if needs.remainder {
        let (h, _) = pop.require_sigma()?;
        Some(bahadur_remainder(&ctx, &sol.alpha_hat, star, h)?)
    } else {
        None
    };
    let covered = if needs.coverage {
        let report = inference::infer(&ctx, &sol.alpha_hat)?;
        let f = cfg.functional.clone().unwrap_or_else(|| {
            let mut e = vec![0.0; ell.dim()];
            e[0] = 1.0;
            e
        });
        let (lo, hi) = inference::confint_functional(&report, &sol.alpha_hat, &f, n, cfg.level)?;
        let target = crate::measure::dot(&f, star);
        Some(lo <= target && target <= hi)
    } else {
        None
    };
    Ok(ReplicationRow {
        n,
        replication: rep,
        scaled_error: diff.iter().map(|d| rn * d).collect(),
        error_norm: euclidean(&diff),
        alpha_hat: sol.alpha_hat.clone(),
        epsilon_certified: sol.epsilon_certified,
        schedule_satisfied: cfg.epsilon_schedule.satisfied(&sol, n, cfg.epsilon_constant),
        remainder,
        covered,
    })
}

fn replicate(
    cfg: &ExperimentConfig,
    sampler: &Sampler,
    ell: &QuantileDirection,
    pop: &Population,
    n: usize,
    needs: Needs,
) -> Vec<Result<ReplicationRow>> {
    let job = |rep: usize| run_one(cfg, sampler, ell, pop, n, rep, needs);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..cfg.replications).into_par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..cfg.replications).map(job).collect()
    }
}

/// Runs the experiment selected by `cfg.experiment`.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.experiment {
        ExperimentKind::Normality => run_normality(cfg),
        ExperimentKind::Bahadur => run_bahadur(cfg),
        ExperimentKind::Consistency => run_consistency(cfg),
        ExperimentKind::Coverage => run_coverage(cfg),
    }
}

pub fn run_normality(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_kind(cfg, ExperimentKind::Normality)
}

pub fn run_bahadur(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_kind(cfg, ExperimentKind::Bahadur)
}

pub fn run_consistency(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_kind(cfg, ExperimentKind::Consistency)
}

pub fn run_coverage(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_kind(cfg, ExperimentKind::Coverage)
}

fn run_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentReport> {
    let ell = cfg.validate()?;
    let sampler = cfg.distribution.sampler()?;
    let pop = Population::build(&cfg.distribution, &ell, cfg.population_atoms, cfg.seed)?;
    let needs = Needs { remainder: kind == ExperimentKind::Bahadur, coverage: kind == ExperimentKind::Coverage };
    let sigma = match kind {
        ExperimentKind::Normality | ExperimentKind::Bahadur => Some(pop.require_sigma()?.1.clone()),
        _ => None,
    };

    let mut per_n = Vec::with_capacity(cfg.n_grid.len());
    let mut all_rows = Vec::new();
    let mut insufficient = false;
    for &n in &cfg.n_grid {
        let results = replicate(cfg, &sampler, &ell, &pop, n, needs);
        let failures = results.iter().filter(|r| r.is_err()).count();
        let rows: Vec<ReplicationRow> = results.into_iter().filter_map(|r| r.ok()).collect();
        let mut entry = PerSize {
            n,
            replications: rows.len(),
            failures,
            schedule_violations: rows.iter().filter(|r| !r.schedule_satisfied).count(),
            median_consistency_error: median(&rows.iter().map(|r| r.error_norm).collect::<Vec<_>>()),
            ..Default::default()
        };
        if rows.len() < 2 {
            insufficient = true;
        }
        match kind {
            ExperimentKind::Normality => {
                let sigma = sigma.as_ref().expect("normality requires sigma");
                let z: Vec<Vec<f64>> = rows.iter().map(|r| r.scaled_error.clone()).collect();
                if let Some(c) = sample_covariance(&z) {
                    entry.relative_frobenius_error = Some((&c - sigma).norm() / sigma.norm());
                    entry.empirical_covariance = Some(to_rows(&c));
                    entry.ks_statistics = Some(
                        (0..sigma.nrows())
                            .map(|k| {
                                let sd = sigma[(k, k)].sqrt();
                                ks_statistic_normal(&z.iter().map(|row| row[k] / sd).collect::<Vec<_>>())
                            })
                            .collect(),
                    );
                }
                entry.population_sigma = Some(to_rows(sigma));
            }
            ExperimentKind::Bahadur => {
                entry.median_remainder = median(&rows.iter().filter_map(|r| r.remainder).collect::<Vec<_>>());
                entry.population_sigma = sigma.as_ref().map(to_rows);
            }
            ExperimentKind::Coverage => {
                let hits: Vec<bool> = rows.iter().filter_map(|r| r.covered).collect();
                if !hits.is_empty() {
                    entry.coverage = Some(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64);
                }
            }
            ExperimentKind::Consistency => {}
        }
        per_n.push(entry);
        if cfg.keep_rows {
            all_rows.extend(rows);
        }
    }

    let ns: Vec<f64> = per_n.iter().map(|p| p.n as f64).collect();
    let slope_of = |f: &dyn Fn(&PerSize) -> Option<f64>| -> Option<f64> {
        let ys: Option<Vec<f64>> = per_n.iter().map(f).collect();
        ys.and_then(|ys| log_log_slope(&ns, &ys))
    };
    let remainder_slope = if kind == ExperimentKind::Bahadur { slope_of(&|p| p.median_remainder) } else { None };
    let consistency_slope = slope_of(&|p| p.median_consistency_error);
    let (increases, decreasing) = if kind == ExperimentKind::Consistency {
        let meds: Vec<f64> = per_n.iter().filter_map(|p| p.median_consistency_error).collect();
        let inc = meds.windows(2).filter(|w| w[1] >= w[0] && w[0] > 0.0).count();
        (Some(inc), Some(inc <= 1))
    } else {
        (None, None)
    };

    Ok(ExperimentReport {
        version: crate::VERSION.to_string(),
        experiment: kind,
        seed: cfg.seed,
        config: ExperimentConfig { experiment: kind, ..cfg.clone() },
        population: pop.summary(),
        per_n,
        remainder_slope,
        consistency_slope,
        consistency_increases: increases,
        consistency_decreasing: decreasing,
        insufficient_replications: insufficient,
        rows: cfg.keep_rows.then_some(all_rows),
    })
}

/// Objective-level check of the uniform convergence of `phi_n` to `phi` on a
/// ball: median over `replications` of the sup-gap at each size.
pub fn uniform_gap_trend(
    dist: &Distribution,
    population: &AtomicMeasure,
    ell: &QuantileDirection,
    n_grid: &[usize],
    replications: usize,
    radius: f64,
    grid_points: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let sampler = dist.sampler()?;
    let pop_ctx = ObjectiveContext::new(population, ell.clone())?;
    let mut out = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let mut gaps = Vec::with_capacity(replications);
        for rep in 0..replications {
            let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(seed, n, rep));
            let mu = sampler.sample(n, &mut rng)?;
            let ctx = ObjectiveContext::new(&mu, ell.clone())?;
            gaps.push(objective::uniform_convergence_gap(&pop_ctx, &ctx, radius, grid_points, seed)?);
        }
        out.push(median(&gaps).expect("replications >= 1"));
    }
    Ok(out)
}
