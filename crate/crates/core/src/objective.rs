//! The quantile objective `phi(a) = sum_i w_i (|a - x_i| - |x_i|) - <ell, a>`,
//! its subgradients, a computable radius containing every minimizer, and an
//! empirical uniform-convergence diagnostic.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::measure::{self, AtomicMeasure, NormKind, QuantileDirection};

#[derive(Clone, Debug)]
pub struct ObjectiveContext<'a> {
    measure: &'a AtomicMeasure,
    ell: QuantileDirection,
    norm: NormKind,
}

impl<'a> ObjectiveContext<'a> {
    pub fn new(measure: &'a AtomicMeasure, ell: QuantileDirection) -> Result<Self> {
        Self::with_norm(measure, ell, NormKind::Euclidean)
    }

    pub fn with_norm(measure: &'a AtomicMeasure, ell: QuantileDirection, norm: NormKind) -> Result<Self> {
        if ell.dim() != measure.dim() {
            return Err(Error::DimensionMismatch { expected: measure.dim(), got: ell.dim() });
        }
        Ok(Self { measure, ell, norm })
    }

    /// The geometric median objective (`ell = 0`).
    pub fn median(measure: &'a AtomicMeasure) -> Self {
        Self { measure, ell: QuantileDirection::zero(measure.dim()), norm: NormKind::Euclidean }
    }

    pub fn measure(&self) -> &'a AtomicMeasure {
        self.measure
    }

    pub fn ell(&self) -> &[f64] {
        self.ell.vector()
    }

    pub fn direction(&self) -> &QuantileDirection {
        &self.ell
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.measure.dim()
    }

    pub(crate) fn require_euclidean(&self) -> Result<()> {
        match self.norm {
            NormKind::Euclidean => Ok(()),
            other => Err(Error::UnsupportedNorm(other)),
        }
    }
}

pub fn phi(ctx: &ObjectiveContext<'_>, alpha: &[f64]) -> f64 {
    debug_assert_eq!(alpha.len(), ctx.dim());
    let mut diff = vec![0.0; alpha.len()];
    let mut acc = 0.0;
    for (x, w) in ctx.measure.iter() {
        if w == 0.0 {
            continue;
        }
        for ((d, a), xi) in diff.iter_mut().zip(alpha).zip(x) {
            *d = a - xi;
        }
        acc += w * (measure::norm(&diff, ctx.norm) - measure::norm(x, ctx.norm));
    }
    acc - measure::dot(ctx.ell(), alpha)
}

/// Index of the first atom at the evaluation point and the total weight of
/// all atoms there (duplicates are separate atoms).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomHit {
    pub index: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgradientResult {
    pub value: f64,
    pub subgradient: Vec<f64>,
    pub at_atom: Option<AtomHit>,
}

/// `g = sum_{x_i != a} w_i (a - x_i)/|a - x_i| - ell`. Atoms at `a` contribute
/// nothing, which is a valid choice from the unit-ball subdifferential of the
/// norm at the origin.
pub fn subgradient(ctx: &ObjectiveContext<'_>, alpha: &[f64]) -> Result<SubgradientResult> {
    subgradient_with_snap(ctx, alpha, 0.0)
}

/// As [`subgradient`], treating atoms within distance `snap` of `alpha` as
/// coincident with it.
pub fn subgradient_with_snap(
    ctx: &ObjectiveContext<'_>,
    alpha: &[f64],
    snap: f64,
) -> Result<SubgradientResult> {
    ctx.require_euclidean()?;
    let d = ctx.dim();
    let mut g: Vec<f64> = ctx.ell().iter().map(|l| -l).collect();
    let mut diff = vec![0.0; d];
    let mut value = 0.0;
    let mut hit: Option<AtomHit> = None;
    for (i, (x, w)) in ctx.measure.iter().enumerate() {
        for ((dk, a), xk) in diff.iter_mut().zip(alpha).zip(x) {
            *dk = a - xk;
        }
        let r = measure::euclidean(&diff);
        value += w * (r - measure::euclidean(x));
        if r <= snap {
            match hit.as_mut() {
                Some(h) => h.weight += w,
                None => hit = Some(AtomHit { index: i, weight: w }),
            }
            continue;
        }
        let s = w / r;
        for (gk, dk) in g.iter_mut().zip(&diff) {
            *gk += s * dk;
        }
    }
    value -= measure::dot(ctx.ell(), alpha);
    Ok(SubgradientResult { value, subgradient: g, at_atom: hit })
}

/// `h_n(r) = (1/r) sum_i w_i |x_i| 1{|x_i| <= r} + sum_i w_i 1{|x_i| > r}`.
pub fn h_function(mu: &AtomicMeasure, r: f64) -> f64 {
    assert!(r > 0.0, "h is defined for r > 0");
    let mut inner = 0.0;
    let mut outer = 0.0;
    for (x, w) in mu.iter() {
        let nx = measure::euclidean(x);
        if nx <= r {
            inner += w * nx;
        } else {
            outer += w;
        }
    }
    inner / r + outer
}

/// Smallest `r` on the grid of atom norms (then doubling past the largest)
/// with `h_n(r) < (1 - |ell|) / 2`. Since `h_n` is nonincreasing and
/// `phi(a) >= |a| (1 - |ell| - 2 h_n(|a|))`, every point outside the closed
/// ball `B(0, R)` has `phi > 0 = phi(0) >= inf phi`.
pub fn radius_bound(ctx: &ObjectiveContext<'_>) -> Result<f64> {
    ctx.require_euclidean()?;
    let threshold = 0.5 * (1.0 - ctx.direction().magnitude());
    let mut norms: Vec<(f64, f64)> = ctx.measure.iter().map(|(x, w)| (measure::euclidean(x), w)).collect();
    norms.sort_by(|a, b| a.0.total_cmp(&b.0));

    let total_first_moment: f64 = norms.iter().map(|(r, w)| r * w).sum();
    let max_norm = norms.last().map(|n| n.0).unwrap_or(0.0);
    if max_norm == 0.0 {
        // All mass at the origin: h_n vanishes identically.
        return Ok(1.0);
    }

    // Prefix sums over the sorted norms; ties are consumed together.
    let mut inner = 0.0;
    let mut below = 0.0;
    let mut i = 0;
    while i < norms.len() {
        let r = norms[i].0;
        while i < norms.len() && norms[i].0 == r {
            inner += norms[i].0 * norms[i].1;
            below += norms[i].1;
            i += 1;
        }
        if r > 0.0 {
            let h = inner / r + (1.0 - below).max(0.0);
            if h < threshold {
                return Ok(r);
            }
        }
    }
    let mut r = max_norm;
    loop {
        r *= 2.0;
        if total_first_moment / r < threshold {
            return Ok(r);
        }
    }
}

/// First `count` primes, used as Halton bases.
fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut c = 2u64;
    while out.len() < count {
        if out.iter().take_while(|p| *p * *p <= c).all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic probe points in the closed ball `B(0, radius)` of R^dim.
///
/// For `dim <= 3` this is the regular grid with `points_per_axis` nodes on
/// `[-radius, radius]^dim` restricted to the ball. Above that it is a
/// randomly shifted Halton sequence of `points_per_axis` points pushed into
/// the ball through a gaussian direction and a `u^(1/d)` radius.
pub fn ball_probes(dim: usize, radius: f64, points_per_axis: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(points_per_axis >= 1);
    if dim <= 3 {
        let k = points_per_axis;
        let coord = |i: usize| {
            if k == 1 {
                0.0
            } else {
                -radius + 2.0 * radius * i as f64 / (k - 1) as f64
            }
        };
        let total = k.pow(dim as u32);
        return (0..total)
            .map(|mut idx| {
                (0..dim)
                    .map(|_| {
                        let c = coord(idx % k);
                        idx /= k;
                        c
                    })
                    .collect::<Vec<f64>>()
            })
            .filter(|p| measure::euclidean(p) <= radius * (1.0 + 1e-12))
            .collect();
    }
    let bases = primes(dim + 1);
    let mut state = seed;
    let shifts: Vec<f64> = bases.iter().map(|_| (splitmix(&mut state) >> 11) as f64 / (1u64 << 53) as f64).collect();
    let normal = Normal::standard();
    (1..=points_per_axis as u64)
        .map(|i| {
            let u: Vec<f64> = bases
                .iter()
                .zip(&shifts)
                .map(|(b, s)| {
                    let v = radical_inverse(i, *b) + s;
                    (v - v.floor()).clamp(1e-12, 1.0 - 1e-12)
                })
                .collect();
            let z: Vec<f64> = u[..dim].iter().map(|v| normal.inverse_cdf(*v)).collect();
            let nz = measure::euclidean(&z);
            let rad = radius * u[dim].powf(1.0 / dim as f64);
            z.iter().map(|c| c * rad / nz).collect()
        })
        .collect()
}

/// `sup |phi_sample - phi_population|` over the probe set of [`ball_probes`].
pub fn uniform_convergence_gap(
    population: &ObjectiveContext<'_>,
    sample: &ObjectiveContext<'_>,
    ball_radius: f64,
    grid_points: usize,
    seed: u64,
) -> Result<f64> {
    if population.dim() != sample.dim() {
        return Err(Error::DimensionMismatch { expected: population.dim(), got: sample.dim() });
    }
    if population.ell() != sample.ell() {
        return Err(Error::Value("population and sample use different directions".into()));
    }
    if !(ball_radius > 0.0) || grid_points == 0 {
        return Err(Error::Value("need a positive radius and at least one probe".into()));
    }
    let probes = ball_probes(population.dim(), ball_radius, grid_points, seed);
    let gap = |p: &Vec<f64>| (phi(sample, p) - phi(population, p)).abs();
    #[cfg(feature = "parallel")]
    let out = {
        use rayon::prelude::*;
        probes.par_iter().map(gap).reduce(|| 0.0, f64::max)
    };
    #[cfg(not(feature = "parallel"))]
    let out = probes.iter().map(gap).fold(0.0, f64::max);
    Ok(out)
}
