use geoquant::montecarlo::{self, Distribution, ExperimentConfig, ExperimentKind};
use geoquant::{univariate_quantile, AtomicMeasure};

fn config(dist: Distribution, ell: Vec<f64>, n_grid: Vec<usize>, reps: usize, seed: u64, kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(dist, ell, n_grid, reps, seed);
    cfg.experiment = kind;
    cfg
}

#[test]
fn wald_interval_coverage() {
    let cfg = config(Distribution::standard_gaussian(2), vec![0.0, 0.0], vec![500], 2000, 17, ExperimentKind::Coverage);
    let rep = montecarlo::run_coverage(&cfg).unwrap();
    let cov = rep.per_n[0].coverage.unwrap();
    assert!((0.93..=0.97).contains(&cov), "coverage {cov}");
    assert_eq!(rep.per_n[0].failures, 0);
}

#[test]
fn gaussian_consistency_medians_decrease() {
    let cfg = config(Distribution::standard_gaussian(3), vec![0.0; 3], vec![100, 400, 1600], 60, 3, ExperimentKind::Consistency);
    let rep = montecarlo::run_consistency(&cfg).unwrap();
    let meds: Vec<f64> = rep.per_n.iter().map(|p| p.median_consistency_error.unwrap()).collect();
    assert!(meds.windows(2).all(|w| w[1] < w[0]), "{meds:?}");
    assert_eq!(rep.consistency_decreasing, Some(true));
}

#[test]
fn collinear_distribution_converges_to_the_line_median() {
    // Atoms on the first axis with probabilities 1/3 each: the line median is
    // the middle atom, which the univariate quantile confirms.
    let atoms = vec![vec![-1.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]];
    let line = AtomicMeasure::uniform(atoms.iter().map(|a| vec![a[0]]).collect()).unwrap();
    let q = univariate_quantile(&line, 0.0).unwrap();
    assert!(q.unique && q.lo == 0.0);

    let cfg = config(Distribution::UniformAtoms { atoms }, vec![0.0, 0.0], vec![50, 200, 800], 40, 4, ExperimentKind::Consistency);
    let rep = montecarlo::run_consistency(&cfg).unwrap();
    assert_eq!(rep.population.alpha_star, vec![q.lo, 0.0]);
    let meds: Vec<f64> = rep.per_n.iter().map(|p| p.median_consistency_error.unwrap()).collect();
    assert_eq!(*meds.last().unwrap(), 0.0, "{meds:?}");
}

#[test]
fn asymmetric_truth_is_certified() {
    let d = Distribution::Gaussian { mean: vec![0.0, 0.0], covariance: montecarlo::Covariance::Diagonal(vec![1.0, 4.0]) };
    let cfg = config(d, vec![0.3, 0.0], vec![200, 800], 30, 8, ExperimentKind::Consistency);
    let rep = montecarlo::run_consistency(&cfg).unwrap();
    assert_eq!(rep.population.method, montecarlo::TruthMethod::DenseSolve);
    assert!(rep.population.atoms >= 100_000);
    assert!(rep.population.epsilon_certified < 1e-9);
    assert!(rep.per_n[1].median_consistency_error < rep.per_n[0].median_consistency_error);
}

#[test]
fn epsilon_schedules_are_enforced() {
    for schedule in [
        montecarlo::EpsilonSchedule::Exact,
        montecarlo::EpsilonSchedule::OInvN,
        montecarlo::EpsilonSchedule::OInvN32,
        montecarlo::EpsilonSchedule::OInvN2,
    ] {
        let mut cfg = config(Distribution::standard_gaussian(2), vec![0.2, -0.1], vec![100, 400], 20, 12, ExperimentKind::Consistency);
        cfg.epsilon_schedule = schedule;
        cfg.population_atoms = 10_000;
        let rep = montecarlo::run(&cfg).unwrap();
        for p in &rep.per_n {
            assert_eq!(p.schedule_violations, 0, "{schedule:?} at n = {}", p.n);
            assert_eq!(p.failures, 0);
        }
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let cfg = config(Distribution::standard_gaussian(2), vec![0.0, 0.0], vec![100, 300], 24, 99, ExperimentKind::Bahadur);
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| serde_json::to_string(&montecarlo::run(&cfg).unwrap()).unwrap())
    };
    let one = run_with(1);
    assert_eq!(one, run_with(4));
    assert_eq!(one, run_with(3));
}

#[test]
fn empirical_covariances_are_psd() {
    let cfg = config(Distribution::standard_gaussian(2), vec![0.0, 0.0], vec![200], 50, 21, ExperimentKind::Normality);
    let rep = montecarlo::run_normality(&cfg).unwrap();
    let c = geoquant::inference::from_rows(rep.per_n[0].empirical_covariance.as_ref().unwrap()).unwrap();
    assert_eq!(c, c.transpose());
    assert!(c.symmetric_eigen().eigenvalues.min() >= -1e-12);
}

#[test]
fn dirac_population_has_no_normality_report() {
    let cfg = config(
        Distribution::UniformAtoms { atoms: vec![vec![1.0, 1.0]] },
        vec![0.0, 0.0],
        vec![10],
        3,
        1,
        ExperimentKind::Normality,
    );
    assert!(montecarlo::run(&cfg).is_err());
}
