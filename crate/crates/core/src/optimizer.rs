//! Certified approximate quantiles by a Weiszfeld-type fixed-point iteration.
//!
//! Away from atoms the update `a <- (sum w_i x_i / r_i + ell) / (sum w_i / r_i)`
//! minimizes a quadratic majorizer of the objective, so every step descends.
//! When an iterate sits on an atom the subdifferential condition
//! `|sum_{x_i != a} w_i u_i - ell| <= w(a)` decides optimality; if it fails, a
//! damped step along the negative reduced gradient leaves the atom.
//!
//! The reported gap uses convexity: `phi(a) - inf phi <= |g| (|a| + R)` where
//! every minimizer lies in `B(0, R)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{self, euclidean};
use crate::objective::{self, phi, ObjectiveContext};

/// Distances below `NEAR_ATOM_REL * (1 + |a|)` count as atom coincidence.
pub const NEAR_ATOM_REL: f64 = 1e-14;

const ARMIJO_C: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    WeightedMean,
    CoordinatewiseMedian,
    Point(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_shrink: f64,
    pub init: Init,
    pub target_epsilon: Option<f64>,
    /// Extra radius within which an atom is treated as hit (0 disables).
    pub atom_snap: f64,
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            grad_tol: 1e-10,
            step_shrink: 0.5,
            init: Init::WeightedMean,
            target_epsilon: None,
            atom_snap: 0.0,
            record_trace: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config("grad_tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(Error::Config("step_shrink must lie in (0, 1)".into()));
        }
        if let Some(t) = self.target_epsilon {
            if !(t >= 0.0) {
                return Err(Error::Config("target_epsilon must be nonnegative".into()));
            }
        }
        if !(self.atom_snap >= 0.0) {
            return Err(Error::Config("atom_snap must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub subgrad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileSolution {
    pub alpha_hat: Vec<f64>,
    pub value: f64,
    pub epsilon_certified: f64,
    pub subgrad_norm: f64,
    pub iterations: usize,
    pub at_atom: bool,
    pub converged: bool,
    /// Radius of the ball around the origin that contains every minimizer.
    pub radius: f64,
    pub trace: Vec<TraceEntry>,
}

/// One pass over the atoms at `alpha`.
struct Pass {
    value: f64,
    /// Gradient with coincident atoms left out.
    grad: Vec<f64>,
    inv_r_sum: f64,
    weighted_x: Vec<f64>,
    atom_weight: f64,
    /// First atom within the coincidence guard.
    hit: Option<usize>,
    nearest: Option<(usize, f64)>,
}

fn pass(ctx: &ObjectiveContext<'_>, alpha: &[f64], snap: f64) -> Pass {
    let d = alpha.len();
    let ell = ctx.ell();
    let guard = snap.max(NEAR_ATOM_REL * (1.0 + euclidean(alpha)));
    let mut p = Pass {
        value: 0.0,
        grad: ell.iter().map(|l| -l).collect(),
        inv_r_sum: 0.0,
        weighted_x: vec![0.0; d],
        atom_weight: 0.0,
        hit: None,
        nearest: None,
    };
    let mut diff = vec![0.0; d];
    for (i, (x, w)) in ctx.measure().iter().enumerate() {
        for ((dk, a), xk) in diff.iter_mut().zip(alpha).zip(x) {
            *dk = a - xk;
        }
        let r = euclidean(&diff);
        p.value += w * (r - euclidean(x));
        if w == 0.0 {
            continue;
        }
        if r <= guard {
            p.atom_weight += w;
            p.hit.get_or_insert(i);
            continue;
        }
        if p.nearest.is_none_or(|(_, nr)| r < nr) {
            p.nearest = Some((i, r));
        }
        let s = w / r;
        p.inv_r_sum += s;
        for k in 0..d {
            p.grad[k] += s * diff[k];
            p.weighted_x[k] += s * x[k];
        }
    }
    p.value -= measure::dot(ell, alpha);
    p
}

fn initial_point(ctx: &ObjectiveContext<'_>, init: &Init) -> Result<Vec<f64>> {
    let mu = ctx.measure();
    match init {
        Init::WeightedMean => Ok(mu.mean()),
        Init::CoordinatewiseMedian => Ok(mu.coordinatewise_median()),
        Init::Point(p) => {
            if p.len() != mu.dim() {
                return Err(Error::DimensionMismatch { expected: mu.dim(), got: p.len() });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Value("initial point is not finite".into()));
            }
            Ok(p.clone())
        }
    }
}

struct Best {
    alpha: Vec<f64>,
    value: f64,
    grad_norm: f64,
}

pub fn solve(ctx: &ObjectiveContext<'_>, cfg: &SolverConfig) -> Result<QuantileSolution> {
    ctx.require_euclidean()?;
    cfg.validate()?;
    let ell_norm = ctx.direction().magnitude();
    if ell_norm >= 1.0 {
        return Err(Error::InvalidDirection(ell_norm));
    }
    let radius = objective::radius_bound(ctx)?;
    let mut alpha = initial_point(ctx, &cfg.init)?;
    let mut trace = Vec::new();
    let mut best: Option<Best> = None;
    let mut last_step = f64::INFINITY;

    let finish = |alpha: Vec<f64>, value: f64, grad_norm: f64, iterations: usize, at_atom: bool, converged: bool, trace: Vec<TraceEntry>| {
        let epsilon_certified = if at_atom && grad_norm == 0.0 { 0.0 } else { grad_norm * (euclidean(&alpha) + radius) };
        QuantileSolution {
            alpha_hat: alpha,
            value,
            epsilon_certified,
            subgrad_norm: grad_norm,
            iterations,
            at_atom,
            converged,
            radius,
            trace,
        }
    };

    for it in 0..cfg.max_iters {
        let p = pass(ctx, &alpha, cfg.atom_snap);

        if p.atom_weight > 0.0 {
            let gn = euclidean(&p.grad);
            let excess = (gn - p.atom_weight).max(0.0);
            if cfg.record_trace {
                trace.push(TraceEntry { iteration: it, value: p.value, subgrad_norm: excess });
            }
            if gn <= p.atom_weight {
                // Report the atom itself rather than a point rounding-close to it.
                let atom = ctx.measure().atoms()[p.hit.expect("atom weight implies a hit")].clone();
                let value = phi(ctx, &atom);
                if value <= p.value {
                    return Ok(finish(atom, value, 0.0, it, true, true, trace));
                }
                return Ok(finish(alpha, p.value, 0.0, it, true, true, trace));
            }
            // Leave the atom along the steepest descent direction of the
            // reduced gradient; directional derivative is -(gn - w(a)).
            let dir: Vec<f64> = p.grad.iter().map(|g| -g / gn).collect();
            let mut t = 0.5 * p.nearest.map(|n| n.1).unwrap_or(1.0);
            let mut moved = false;
            while t > f64::MIN_POSITIVE {
                let cand: Vec<f64> = alpha.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                if phi(ctx, &cand) <= p.value - ARMIJO_C * t * excess {
                    alpha = cand;
                    moved = true;
                    break;
                }
                t *= cfg.step_shrink;
            }
            if !moved {
                // Descent failed at machine precision: the atom is optimal up to rounding.
                return Ok(finish(alpha, p.value, excess, it, true, false, trace));
            }
            last_step = t;
            continue;
        }

        let gn = euclidean(&p.grad);
        if cfg.record_trace {
            trace.push(TraceEntry { iteration: it, value: p.value, subgrad_norm: gn });
        }
        if best.as_ref().is_none_or(|b| p.value <= b.value) {
            best = Some(Best { alpha: alpha.clone(), value: p.value, grad_norm: gn });
        }
        let cert = gn * (euclidean(&alpha) + radius);
        if gn <= cfg.grad_tol || cfg.target_epsilon.is_some_and(|t| cert <= t) {
            return Ok(finish(alpha, p.value, gn, it, false, true, trace));
        }

        // Weiszfeld iterates approach an optimal atom only linearly and never
        // reach it; test the nearest atom once the steps are on its scale.
        if let Some((idx, r)) = p.nearest {
            if r <= 10.0 * last_step {
                let atom = ctx.measure().atoms()[idx].clone();
                let q = pass(ctx, &atom, cfg.atom_snap);
                if q.atom_weight > 0.0 && euclidean(&q.grad) <= q.atom_weight && q.value <= p.value {
                    if cfg.record_trace {
                        trace.push(TraceEntry { iteration: it + 1, value: q.value, subgrad_norm: 0.0 });
                    }
                    return Ok(finish(atom, q.value, 0.0, it + 1, true, true, trace));
                }
            }
        }

        let next: Vec<f64> = p
            .weighted_x
            .iter()
            .zip(ctx.ell())
            .map(|(wx, l)| (wx + l) / p.inv_r_sum)
            .collect();
        last_step = measure::distance(&next, &alpha);
        if last_step == 0.0 {
            // Fixed point reached in floating point.
            return Ok(finish(alpha, p.value, gn, it + 1, false, gn <= cfg.grad_tol, trace));
        }
        alpha = next;
    }

    let p = pass(ctx, &alpha, cfg.atom_snap);
    if p.atom_weight == 0.0 {
        let gn = euclidean(&p.grad);
        if best.as_ref().is_none_or(|b| p.value <= b.value) {
            best = Some(Best { alpha: alpha.clone(), value: p.value, grad_norm: gn });
        }
    }
    match best {
        Some(b) => Ok(finish(b.alpha, b.value, b.grad_norm, cfg.max_iters, false, false, trace)),
        None => {
            let gn = (euclidean(&p.grad) - p.atom_weight).max(0.0);
            Ok(finish(alpha, p.value, gn, cfg.max_iters, true, false, trace))
        }
    }
}

/// Brute-force minimization of the objective on a regular 2-D grid. Works
/// for every [`measure::NormKind`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridArgmin {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub resolution: usize,
    pub min_value: f64,
    /// Grid points whose value is within [`GRID_ARGMIN_TOL`] of the minimum.
    pub points: Vec<[f64; 2]>,
    #[serde(skip)]
    mask: Vec<bool>,
}

pub const GRID_ARGMIN_TOL: f64 = 1e-9;
pub const MAX_GRID_RESOLUTION: usize = 4001;

impl GridArgmin {
    pub fn step(&self) -> [f64; 2] {
        let k = (self.resolution - 1) as f64;
        [(self.hi[0] - self.lo[0]) / k, (self.hi[1] - self.lo[1]) / k]
    }

    /// Whether the grid node nearest to `p` belongs to the argmin set.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let step = self.step();
        let mut idx = [0usize; 2];
        for k in 0..2 {
            let t = ((p[k] - self.lo[k]) / step[k]).round();
            if t < 0.0 || t > (self.resolution - 1) as f64 {
                return false;
            }
            idx[k] = t as usize;
        }
        self.mask[idx[1] * self.resolution + idx[0]]
    }
}

pub fn grid_minimize_2d(ctx: &ObjectiveContext<'_>, lo: [f64; 2], hi: [f64; 2], resolution: usize) -> Result<GridArgmin> {
    if ctx.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: ctx.dim() });
    }
    if !(2..=MAX_GRID_RESOLUTION).contains(&resolution) {
        return Err(Error::Value(format!("resolution must lie in 2..={MAX_GRID_RESOLUTION}")));
    }
    if !(lo[0] < hi[0] && lo[1] < hi[1]) || lo.iter().chain(&hi).any(|v| !v.is_finite()) {
        return Err(Error::Value("degenerate grid box".into()));
    }
    let k = (resolution - 1) as f64;
    let node = |i: usize, j: usize| {
        [
            lo[0] + (hi[0] - lo[0]) * i as f64 / k,
            lo[1] + (hi[1] - lo[1]) * j as f64 / k,
        ]
    };
    let row = |j: usize| -> Vec<f64> { (0..resolution).map(|i| phi(ctx, &node(i, j))).collect() };
    #[cfg(feature = "parallel")]
    let values: Vec<f64> = {
        use rayon::prelude::*;
        (0..resolution).into_par_iter().flat_map_iter(row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let values: Vec<f64> = (0..resolution).flat_map(row).collect();

    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mask: Vec<bool> = values.iter().map(|v| *v <= min_value + GRID_ARGMIN_TOL).collect();
    let points = mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(idx, _)| node(idx % resolution, idx / resolution))
        .collect();
    Ok(GridArgmin { lo, hi, resolution, min_value, points, mask })
}
