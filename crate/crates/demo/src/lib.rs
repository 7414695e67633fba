//! Browser bindings for the quantile demo page in `www/`.
//!
//! Point sets cross the boundary as flat `[x0, y0, x1, y1, ...]` arrays with
//! uniform weights.

use geoquant::optimizer::{grid_minimize_2d, solve, SolverConfig};
use geoquant::{phi, AtomicMeasure, NormKind, ObjectiveContext, QuantileDirection};
use wasm_bindgen::prelude::*;

fn measure(points: &[f64]) -> Result<AtomicMeasure, JsError> {
    if points.is_empty() || points.len() % 2 != 0 {
        return Err(JsError::new("need a non-empty list of (x, y) pairs"));
    }
    Ok(AtomicMeasure::uniform(points.chunks(2).map(|c| c.to_vec()).collect())?)
}

fn norm_kind(name: &str) -> Result<NormKind, JsError> {
    Ok(name.parse::<NormKind>()?)
}

/// Objective values on a `res x res` grid over `[lo, hi]^2`, row by row from
/// the bottom, for a heat map.
#[wasm_bindgen]
pub fn objective_field(points: &[f64], ell_x: f64, ell_y: f64, norm: &str, lo: f64, hi: f64, res: usize) -> Result<Vec<f64>, JsError> {
    let mu = measure(points)?;
    let kind = norm_kind(norm)?;
    let ctx = ObjectiveContext::with_norm(&mu, QuantileDirection::with_norm(vec![ell_x, ell_y], kind)?, kind)?;
    if res < 2 || !(lo < hi) {
        return Err(JsError::new("need res >= 2 and lo < hi"));
    }
    let step = (hi - lo) / (res - 1) as f64;
    let mut out = Vec::with_capacity(res * res);
    for j in 0..res {
        for i in 0..res {
            out.push(phi(&ctx, &[lo + step * i as f64, lo + step * j as f64]));
        }
    }
    Ok(out)
}

/// Euclidean quantile for `ell`: `[x, y, certified gap]`.
#[wasm_bindgen]
pub fn quantile(points: &[f64], ell_x: f64, ell_y: f64) -> Result<Vec<f64>, JsError> {
    let mu = measure(points)?;
    let ctx = ObjectiveContext::new(&mu, QuantileDirection::new(vec![ell_x, ell_y])?)?;
    let sol = solve(&ctx, &SolverConfig { record_trace: false, ..Default::default() })?;
    Ok(vec![sol.alpha_hat[0], sol.alpha_hat[1], sol.epsilon_certified])
}

/// Quantiles along the circle `ell = r (cos t, sin t)`, `count` equally
/// spaced angles, as flat `(x, y)` pairs.
#[wasm_bindgen]
pub fn quantile_contour(points: &[f64], r: f64, count: usize) -> Result<Vec<f64>, JsError> {
    let mu = measure(points)?;
    let cfg = SolverConfig { record_trace: false, ..Default::default() };
    let mut out = Vec::with_capacity(2 * count);
    for k in 0..count {
        let t = std::f64::consts::TAU * k as f64 / count as f64;
        let ctx = ObjectiveContext::new(&mu, QuantileDirection::new(vec![r * t.cos(), r * t.sin()])?)?;
        out.extend_from_slice(&solve(&ctx, &cfg)?.alpha_hat);
    }
    Ok(out)
}

/// 1 where a grid node attains the minimum (the median set for `ell = 0`),
/// 0 elsewhere; same layout as [`objective_field`].
#[wasm_bindgen]
pub fn argmin_mask(points: &[f64], ell_x: f64, ell_y: f64, norm: &str, lo: f64, hi: f64, res: usize) -> Result<Vec<u8>, JsError> {
    let mu = measure(points)?;
    let kind = norm_kind(norm)?;
    let ctx = ObjectiveContext::with_norm(&mu, QuantileDirection::with_norm(vec![ell_x, ell_y], kind)?, kind)?;
    let grid = grid_minimize_2d(&ctx, [lo, lo], [hi, hi], res)?;
    let step = (hi - lo) / (res - 1) as f64;
    let mut out = Vec::with_capacity(res * res);
    for j in 0..res {
        for i in 0..res {
            out.push(u8::from(grid.contains([lo + step * i as f64, lo + step * j as f64])));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contour_of_a_symmetric_cross_is_symmetric() {
        let pts = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let c = quantile_contour(&pts, 0.5, 4).unwrap();
        assert!((c[0] + c[4]).abs() < 1e-8 && (c[3] + c[7]).abs() < 1e-8);
        assert!(c[0] > 0.0 && c[3] > 0.0);
    }

    #[test]
    fn sup_norm_median_square() {
        let res = 41;
        let mask = argmin_mask(&[-1.0, 0.0, 1.0, 0.0], 0.0, 0.0, "linf", -2.0, 2.0, res).unwrap();
        let at = |x: f64, y: f64| {
            let i = ((x + 2.0) / 0.1).round() as usize;
            let j = ((y + 2.0) / 0.1).round() as usize;
            mask[j * res + i]
        };
        assert_eq!(at(0.0, 0.0), 1);
        assert_eq!(at(0.0, 0.9), 1);
        assert_eq!(at(0.8, 0.8), 0);
        assert_eq!(at(1.5, 0.0), 0);
    }

    #[test]
    fn field_vanishes_at_origin() {
        let res = 5;
        let f = objective_field(&[1.0, 2.0, -3.0, 0.5], 0.2, 0.1, "euclidean", -2.0, 2.0, res).unwrap();
        assert_eq!(f[2 * res + 2], 0.0);
    }

    #[test]
    fn two_point_quantile() {
        let q = quantile(&[-1.0, 0.0, 1.0, 0.0], 0.0, 0.5).unwrap();
        assert!((q[1] - 1.0 / 3f64.sqrt()).abs() < 1e-8);
    }
}
