use geoquant::inference::{beta_from_score, estimate_h, estimate_v};
use geoquant::measure::euclidean;
use geoquant::{phi, solve, subgradient, univariate_quantile, AtomicMeasure, ObjectiveContext, QuantileDirection, SolverConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn measure(dim: usize) -> impl Strategy<Value = AtomicMeasure> {
    prop::collection::vec((prop::collection::vec(-5.0..5.0f64, dim), 0.05..1.0f64), 1..12).prop_map(|pairs| {
        let (atoms, masses) = pairs.into_iter().unzip();
        AtomicMeasure::from_masses(atoms, masses).unwrap()
    })
}

fn direction(dim: usize) -> impl Strategy<Value = QuantileDirection> {
    (prop::collection::vec(-1.0..1.0f64, dim), 0.0..0.9f64).prop_map(|(v, r)| {
        let n = euclidean(&v);
        if n == 0.0 {
            QuantileDirection::zero(v.len())
        } else {
            QuantileDirection::new(v.iter().map(|x| r * x / n).collect()).unwrap()
        }
    })
}

fn case(dim: usize) -> impl Strategy<Value = (AtomicMeasure, QuantileDirection, Vec<f64>, Vec<f64>)> {
    (measure(dim), direction(dim), prop::collection::vec(-6.0..6.0f64, dim), prop::collection::vec(-6.0..6.0f64, dim))
}

fn any_case() -> impl Strategy<Value = (AtomicMeasure, QuantileDirection, Vec<f64>, Vec<f64>)> {
    (1usize..5).prop_flat_map(case)
}

fn tight() -> SolverConfig {
    SolverConfig { grad_tol: 1e-12, record_trace: false, ..Default::default() }
}

proptest! {
    #[test]
    fn objective_vanishes_at_origin((mu, ell, _, _) in any_case()) {
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        prop_assert_eq!(phi(&ctx, &vec![0.0; mu.dim()]), 0.0);
    }

    #[test]
    fn convex_along_segments((mu, ell, a, b) in any_case(), t in 0.0..1.0f64) {
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let (fa, fb) = (phi(&ctx, &a), phi(&ctx, &b));
        prop_assert!(phi(&ctx, &m) <= t * fa + (1.0 - t) * fb + 1e-12 * (1.0 + fa.abs() + fb.abs()));
    }

    #[test]
    fn lipschitz_with_constant_one_plus_ell((mu, ell, a, b) in any_case()) {
        let l = 1.0 + ell.magnitude();
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let (fa, fb) = (phi(&ctx, &a), phi(&ctx, &b));
        prop_assert!((fa - fb).abs() <= l * euclidean(&d) + 1e-12 * (1.0 + fa.abs()));
    }

    #[test]
    fn subgradient_supports_the_graph((mu, ell, a, b) in any_case()) {
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        let g = subgradient(&ctx, &a).unwrap().subgradient;
        let lin: f64 = g.iter().zip(b.iter().zip(&a)).map(|(gk, (y, x))| gk * (y - x)).sum();
        let (fa, fb) = (phi(&ctx, &a), phi(&ctx, &b));
        prop_assert!(fb >= fa + lin - 1e-10 * (1.0 + fa.abs() + fb.abs()));
    }

    #[test]
    fn scale_and_translation_equivariance((mu, ell, shift, _) in any_case(), c in 0.1..10.0f64) {
        let moved = mu.affine(c, &shift).unwrap();
        let s0 = solve(&ObjectiveContext::new(&mu, ell.clone()).unwrap(), &tight()).unwrap();
        let ctx1 = ObjectiveContext::new(&moved, ell).unwrap();
        let s1 = solve(&ctx1, &tight()).unwrap();
        let mapped: Vec<f64> = s0.alpha_hat.iter().zip(&shift).map(|(x, s)| c * x + s).collect();
        // The mapped point is optimal for the moved problem up to both certificates.
        let gap = phi(&ctx1, &mapped) - s1.value;
        prop_assert!(gap.abs() <= c * s0.epsilon_certified + s1.epsilon_certified + 1e-9 * (1.0 + c));
    }

    #[test]
    fn curvature_and_score_covariance_are_psd((mu, ell, a, _) in any_case()) {
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        if let (Ok(h), Ok(v)) = (estimate_h(&ctx, &a), estimate_v(&ctx, &a)) {
            prop_assert!(h.clone().symmetric_eigen().eigenvalues.min() >= -1e-12);
            prop_assert!(v.clone().symmetric_eigen().eigenvalues.min() >= -1e-12);
            prop_assert_eq!(h.clone(), h.transpose());
        }
    }

    #[test]
    fn gradient_matches_central_differences((mu, ell, a, _) in case(3)) {
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        let gap = mu.atoms().iter().map(|x| euclidean(&x.iter().zip(&a).map(|(p, q)| p - q).collect::<Vec<_>>())).fold(f64::INFINITY, f64::min);
        prop_assume!(gap > 1e-2);
        let g = subgradient(&ctx, &a).unwrap().subgradient;
        let h = 1e-6;
        for k in 0..3 {
            let mut p = a.clone();
            let mut m = a.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (phi(&ctx, &p) - phi(&ctx, &m)) / (2.0 * h);
            prop_assert!((fd - g[k]).abs() <= 1e-6, "coordinate {}: {} vs {}", k, fd, g[k]);
        }
    }

    #[test]
    fn one_dimensional_solver_lands_in_the_interval((mu, ell, _, _) in case(1)) {
        let q = univariate_quantile(&mu, ell.vector()[0]).unwrap();
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        let sol = solve(&ctx, &tight()).unwrap();
        prop_assert!(sol.value <= phi(&ctx, &[q.lo]) + sol.epsilon_certified + 1e-12);
        prop_assert!(sol.value <= phi(&ctx, &[q.hi]) + sol.epsilon_certified + 1e-12);
    }

    #[test]
    fn univariate_interval_is_monotone_in_ell(mu in measure(1), a in -0.95..0.95f64, b in -0.95..0.95f64) {
        let (lo_ell, hi_ell) = if a <= b { (a, b) } else { (b, a) };
        let qa = univariate_quantile(&mu, lo_ell).unwrap();
        let qb = univariate_quantile(&mu, hi_ell).unwrap();
        prop_assert!(qa.lo <= qb.lo && qa.hi <= qb.hi);
    }

    #[test]
    fn objective_is_flat_on_the_univariate_interval(mu in measure(1), l in -0.9..0.9f64, t in 0.0..1.0f64) {
        let q = univariate_quantile(&mu, l).unwrap();
        let ctx = ObjectiveContext::new(&mu, QuantileDirection::new(vec![l]).unwrap()).unwrap();
        let x = q.lo + t * (q.hi - q.lo);
        let (f0, fx) = (phi(&ctx, &[q.lo]), phi(&ctx, &[x]));
        prop_assert!((f0 - fx).abs() <= 1e-12 * (1.0 + f0.abs()));
    }

    #[test]
    fn beta_is_linear_in_the_score(c in -10.0..10.0f64, g in prop::collection::vec(-1.0..1.0f64, 2)) {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b1 = beta_from_score(&h, &g, 100).unwrap();
        let cg: Vec<f64> = g.iter().map(|x| c * x).collect();
        let bc = beta_from_score(&h, &cg, 100).unwrap();
        for k in 0..2 {
            prop_assert!((bc[k] - c * b1[k]).abs() <= 1e-12 * (1.0 + bc[k].abs()));
        }
    }

    #[test]
    fn solver_is_deterministic((mu, ell, _, _) in any_case()) {
        let ctx = ObjectiveContext::new(&mu, ell).unwrap();
        prop_assert_eq!(solve(&ctx, &tight()).unwrap(), solve(&ctx, &tight()).unwrap());
    }
}
