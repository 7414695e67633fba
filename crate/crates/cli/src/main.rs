//! `geoquant` command-line tool. JSON goes to stdout (or `--out`), a short
//! human-readable summary to stderr.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure.

mod json;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use geoquant::inference::{self, InferenceReport};
use geoquant::montecarlo::{self, ExperimentConfig, ExperimentReport};
use geoquant::optimizer::{GridArgmin, Init, QuantileSolution, SolverConfig};
use geoquant::taylor::{collinear_sweep, sharpness_lambdas};
use geoquant::{
    grid_minimize_2d, line_mass_sup, load_measure, radius_bound, solve, univariate_quantile, AtomicMeasure, LineMass,
    NormKind, ObjectiveContext, QuantileDirection, QuantileInterval, VERSION,
};
use serde::Serialize;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "geoquant", version, about = "Geometric quantiles of atomic measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the geometric quantile of a measure and certify the gap.
    Estimate(EstimateArgs),
    /// Exact quantile interval of a one-dimensional measure.
    Univariate(UnivariateArgs),
    /// Plug-in curvature, score covariance and sandwich covariance at the estimate.
    Infer(InferArgs),
    /// Run a Monte-Carlo experiment described by a JSON config.
    Simulate(SimulateArgs),
    /// Line-mass and support diagnostics of a measure.
    Diagnose(DiagnoseArgs),
    /// Ratios of the norm Taylor remainders to their bounds along a line (CSV).
    TaylorSweep(TaylorArgs),
    /// Brute-force argmin set on a 2-D grid, for any supported norm.
    GridOracle(GridArgs),
}

#[derive(Args)]
struct Input {
    /// CSV (optionally with a trailing `weight` column) or JSON measure.
    #[arg(long)]
    input: PathBuf,
    /// Write JSON here instead of stdout.
    #[arg(long, visible_alias = "json")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum InitArg {
    Mean,
    Median,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    io: Input,
    /// Quantile direction, comma separated; omitted means the median.
    #[arg(long, allow_hyphen_values = true)]
    ell: Option<String>,
    /// Gradient-norm tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    /// Stop once the certified optimality gap is below this value.
    #[arg(long)]
    target_epsilon: Option<f64>,
    #[arg(long, value_enum, default_value_t = InitArg::Mean)]
    init: InitArg,
    /// Include the per-iteration trace.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct UnivariateArgs {
    #[command(flatten)]
    io: Input,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    ell: f64,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    io: Input,
    #[arg(long, allow_hyphen_values = true)]
    ell: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Linear functional `f` for a Wald interval on `<f, alpha>`, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    functional: Option<String>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-replication rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads; 0 lets the runtime choose.
    #[arg(long, env = "GEOQUANT_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    io: Input,
    /// Also report the radius bound for this direction.
    #[arg(long, allow_hyphen_values = true)]
    ell: Option<String>,
}

#[derive(Args)]
struct TaylorArgs {
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Closest approach to lambda = -1.
    #[arg(long, default_value_t = 1e-6)]
    near: f64,
    #[arg(long, default_value_t = 10.0)]
    far: f64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Euclidean,
    L1,
    Linf,
}

impl From<NormArg> for NormKind {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Euclidean => NormKind::Euclidean,
            NormArg::L1 => NormKind::L1,
            NormArg::Linf => NormKind::Linf,
        }
    }
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    io: Input,
    #[arg(long, allow_hyphen_values = true)]
    ell: Option<String>,
    #[arg(long, value_enum, default_value_t = NormArg::Euclidean)]
    norm: NormArg,
    /// Lower-left corner, `x,y`.
    #[arg(long, allow_hyphen_values = true, default_value = "-2,-2")]
    lo: String,
    /// Upper-right corner, `x,y`.
    #[arg(long, allow_hyphen_values = true, default_value = "2,2")]
    hi: String,
    #[arg(long, default_value_t = 401)]
    resolution: usize,
    /// List every grid point of the argmin set.
    #[arg(long)]
    points: bool,
}

/// Common envelope: every JSON document carries the tool version, the seed
/// (null for deterministic commands) and the resolved configuration.
#[derive(Serialize)]
struct Envelope<C: Serialize, R: Serialize> {
    version: &'static str,
    seed: Option<u64>,
    config: C,
    #[serde(flatten)]
    result: R,
}

fn envelope<C: Serialize, R: Serialize>(config: C, result: R) -> Envelope<C, R> {
    Envelope { version: VERSION, seed: None, config, result }
}

fn parse_vector(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("not a number: {t:?}")))
        .collect()
}

fn direction(ell: Option<&str>, dim: usize, norm: NormKind) -> anyhow::Result<QuantileDirection> {
    let v = match ell {
        Some(s) => parse_vector(s)?,
        None => vec![0.0; dim],
    };
    if v.len() != dim {
        bail!("ell has {} components but the measure has dimension {dim}", v.len());
    }
    Ok(QuantileDirection::with_norm(v, norm)?)
}

fn load(path: &Path) -> anyhow::Result<AtomicMeasure> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(AtomicMeasure::from_json(&text)?)
    } else {
        load_measure(path).with_context(|| format!("loading {}", path.display()))
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> anyhow::Result<()> {
    emit(out, &json::to_string(value)?)
}

#[derive(Serialize)]
struct EstimateConfig<'a> {
    input: &'a Path,
    ell: &'a [f64],
    solver: &'a SolverConfig,
}

fn estimate(a: EstimateArgs) -> anyhow::Result<()> {
    let mu = load(&a.io.input)?;
    let ell = direction(a.ell.as_deref(), mu.dim(), NormKind::Euclidean)?;
    let cfg = SolverConfig {
        max_iters: a.max_iters,
        grad_tol: a.tol,
        init: match a.init {
            InitArg::Mean => Init::WeightedMean,
            InitArg::Median => Init::CoordinatewiseMedian,
        },
        target_epsilon: a.target_epsilon,
        record_trace: a.trace,
        ..Default::default()
    };
    let ctx = ObjectiveContext::new(&mu, ell.clone())?;
    let sol: QuantileSolution = solve(&ctx, &cfg)?;
    eprintln!(
        "alpha_hat = {:?}, phi = {:.6e}, epsilon = {:.3e}, {} iterations{}",
        sol.alpha_hat,
        sol.value,
        sol.epsilon_certified,
        sol.iterations,
        if sol.converged { "" } else { " (not converged)" }
    );
    let conf = EstimateConfig { input: &a.io.input, ell: ell.vector(), solver: &cfg };
    emit_json(a.io.out.as_deref(), &envelope(conf, &sol))
}

#[derive(Serialize)]
struct UnivariateConfig<'a> {
    input: &'a Path,
    ell: f64,
}

fn univariate(a: UnivariateArgs) -> anyhow::Result<()> {
    let mu = load(&a.io.input)?;
    let q: QuantileInterval = univariate_quantile(&mu, a.ell)?;
    eprintln!("quantile interval [{}, {}]{}", q.lo, q.hi, if q.unique { " (unique)" } else { "" });
    emit_json(a.io.out.as_deref(), &envelope(UnivariateConfig { input: &a.io.input, ell: a.ell }, &q))
}

#[derive(Serialize)]
struct InferConfig<'a> {
    input: &'a Path,
    ell: &'a [f64],
    level: f64,
    functional: Option<&'a [f64]>,
    tol: f64,
    /// The plug-in quantities are evaluated at the estimate, not the unknown true quantile.
    centered_at: &'static str,
}

#[derive(Serialize)]
struct ConfidenceInterval {
    functional: Vec<f64>,
    estimate: f64,
    lo: f64,
    hi: f64,
    level: f64,
}

#[derive(Serialize)]
struct InferOutput {
    alpha_hat: Vec<f64>,
    epsilon_certified: f64,
    #[serde(flatten)]
    report: InferenceReport,
    confidence_interval: Option<ConfidenceInterval>,
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let mu = load(&a.io.input)?;
    let ell = direction(a.ell.as_deref(), mu.dim(), NormKind::Euclidean)?;
    let functional = a.functional.as_deref().map(parse_vector).transpose()?;
    if let Some(f) = &functional {
        if f.len() != mu.dim() {
            bail!("functional has {} components but the measure has dimension {}", f.len(), mu.dim());
        }
    }
    if !(a.level > 0.0 && a.level < 1.0) {
        bail!("level must lie in (0, 1)");
    }
    let ctx = ObjectiveContext::new(&mu, ell.clone())?;
    let sol = solve(&ctx, &SolverConfig { grad_tol: a.tol, record_trace: false, ..Default::default() })?;
    let report = inference::infer(&ctx, &sol.alpha_hat)?;
    let ci = match &functional {
        Some(f) => {
            let (lo, hi) = inference::confint_functional(&report, &sol.alpha_hat, f, mu.len(), a.level)?;
            let estimate = f.iter().zip(&sol.alpha_hat).map(|(x, y)| x * y).sum();
            Some(ConfidenceInterval { functional: f.clone(), estimate, lo, hi, level: a.level })
        }
        None => None,
    };
    eprintln!(
        "alpha_hat = {:?}, kappa = {:.4e}{}",
        sol.alpha_hat,
        report.kappa,
        if report.pseudo_inverse { " (singular H: pseudo-inverse used)" } else { "" }
    );
    if let Some(ci) = &ci {
        eprintln!("{:.0}% interval [{:.6}, {:.6}]", 100.0 * ci.level, ci.lo, ci.hi);
    }
    let conf = InferConfig {
        input: &a.io.input,
        ell: ell.vector(),
        level: a.level,
        functional: functional.as_deref(),
        tol: a.tol,
        centered_at: "alpha_hat",
    };
    let out = InferOutput { alpha_hat: sol.alpha_hat, epsilon_certified: sol.epsilon_certified, report, confidence_interval: ci };
    emit_json(a.io.out.as_deref(), &envelope(conf, out))
}

fn write_rows(path: &Path, report: &ExperimentReport) -> anyhow::Result<()> {
    let rows = report.rows.as_deref().unwrap_or_default();
    let d = report.population.alpha_star.len();
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header: Vec<String> =
        ["n", "replication", "error_norm", "epsilon_certified", "schedule_satisfied", "remainder", "covered"]
            .map(String::from)
            .to_vec();
    header.extend((0..d).map(|k| format!("alpha_hat_{k}")));
    header.extend((0..d).map(|k| format!("scaled_error_{k}")));
    w.write_record(&header)?;
    let opt = |x: Option<String>| x.unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.n.to_string(),
            r.replication.to_string(),
            json::format_g17(r.error_norm),
            json::format_g17(r.epsilon_certified),
            r.schedule_satisfied.to_string(),
            opt(r.remainder.map(json::format_g17)),
            opt(r.covered.map(|c| c.to_string())),
        ];
        rec.extend(r.alpha_hat.iter().map(|x| json::format_g17(*x)));
        rec.extend(r.scaled_error.iter().map(|x| json::format_g17(*x)));
        w.write_record(&rec)?;
    }
    Ok(w.flush()?)
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if a.csv.is_some() {
        cfg.keep_rows = true;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.threads).build()?;
    let report = pool.install(|| montecarlo::run(&cfg))?;
    for p in &report.per_n {
        eprintln!(
            "n = {:>6}: median |a - a*| = {:.4e}{}{}{}, {} failures",
            p.n,
            p.median_consistency_error.unwrap_or(f64::NAN),
            p.relative_frobenius_error.map(|e| format!(", cov rel err {e:.4}")).unwrap_or_default(),
            p.median_remainder.map(|e| format!(", median remainder {e:.4e}")).unwrap_or_default(),
            p.coverage.map(|c| format!(", coverage {c:.4}")).unwrap_or_default(),
            p.failures
        );
    }
    if let Some(s) = report.remainder_slope {
        eprintln!("remainder slope {s:.4}");
    }
    if let Some(s) = report.consistency_slope {
        eprintln!("consistency slope {s:.4}");
    }
    if report.insufficient_replications {
        eprintln!("warning: fewer than two replications at some n; covariances undefined");
    }
    if let Some(path) = &a.csv {
        write_rows(path, &report)?;
    }
    let mut report = report;
    if a.csv.is_some() {
        report.rows = None;
    }
    emit_json(a.out.as_deref(), &report)
}

#[derive(Serialize)]
struct DiagnoseConfig<'a> {
    input: &'a Path,
    ell: Option<&'a [f64]>,
}

#[derive(Serialize)]
struct Diagnosis {
    line_mass_sup: f64,
    #[serde(rename = "in_M_minus")]
    in_m_minus: bool,
    witness: LineMass,
    atoms: usize,
    dim: usize,
    max_weight: f64,
    diameter: f64,
    radius_bound: Option<f64>,
}

fn diagnose(a: DiagnoseArgs) -> anyhow::Result<()> {
    let mu = load(&a.io.input)?;
    let lm = line_mass_sup(&mu);
    let ell = a.ell.as_deref().map(|s| direction(Some(s), mu.dim(), NormKind::Euclidean)).transpose()?;
    let radius = ell.as_ref().map(|l| ObjectiveContext::new(&mu, l.clone()).and_then(|c| radius_bound(&c))).transpose()?;
    let d = Diagnosis {
        line_mass_sup: lm.mass,
        in_m_minus: lm.concentrated_on_line(),
        atoms: mu.len(),
        dim: mu.dim(),
        max_weight: mu.max_weight(),
        diameter: mu.diameter(),
        radius_bound: radius,
        witness: lm,
    };
    eprintln!(
        "largest mass on a line {:.6}{}",
        d.line_mass_sup,
        if d.in_m_minus { ": the measure lies on a line" } else { "" }
    );
    emit_json(a.io.out.as_deref(), &envelope(DiagnoseConfig { input: &a.io.input, ell: ell.as_ref().map(|l| l.vector()) }, d))
}

fn taylor_sweep(a: TaylorArgs) -> anyhow::Result<()> {
    if a.dim == 0 || !(a.near > 0.0 && a.far > a.near) || a.count < 2 {
        bail!("need dim >= 1, 0 < near < far and count >= 2");
    }
    let mut lambdas = sharpness_lambdas(a.near, a.far, a.count);
    lambdas.push(-2.0);
    lambdas.sort_by(f64::total_cmp);
    let rows = collinear_sweep(a.dim, &lambdas);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lambda", "ratio_norm2", "ratio_grad1"])?;
    for r in &rows {
        w.write_record([r.lambda, r.ratio_norm2, r.ratio_grad1].map(json::format_g17))?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    let sup = |f: fn(&geoquant::taylor::SweepRow) -> f64| rows.iter().map(f).filter(|x| x.is_finite()).fold(0.0, f64::max);
    eprintln!("sup ratios: second-order {:.6}, gradient {:.6}", sup(|r| r.ratio_norm2), sup(|r| r.ratio_grad1));
    emit(a.out.as_deref(), &text)
}

#[derive(Serialize)]
struct GridConfig<'a> {
    input: &'a Path,
    ell: &'a [f64],
    norm: NormKind,
    lo: [f64; 2],
    hi: [f64; 2],
    resolution: usize,
}

#[derive(Serialize)]
struct GridOutput {
    min_value: f64,
    step: [f64; 2],
    count: usize,
    /// Bounding box of the argmin points, `[[xmin, ymin], [xmax, ymax]]`.
    bounding_box: [[f64; 2]; 2],
    points: Option<Vec<[f64; 2]>>,
}

fn corner(s: &str) -> anyhow::Result<[f64; 2]> {
    match parse_vector(s)?.as_slice() {
        [x, y] => Ok([*x, *y]),
        _ => bail!("expected two comma-separated numbers, got {s:?}"),
    }
}

fn grid_oracle(a: GridArgs) -> anyhow::Result<()> {
    let mu = load(&a.io.input)?;
    let norm = NormKind::from(a.norm);
    let ell = direction(a.ell.as_deref(), mu.dim(), norm)?;
    let (lo, hi) = (corner(&a.lo)?, corner(&a.hi)?);
    let ctx = ObjectiveContext::with_norm(&mu, ell.clone(), norm)?;
    let grid: GridArgmin = grid_minimize_2d(&ctx, lo, hi, a.resolution)?;
    let mut bbox = [[f64::INFINITY; 2], [f64::NEG_INFINITY; 2]];
    for p in &grid.points {
        for k in 0..2 {
            bbox[0][k] = bbox[0][k].min(p[k]);
            bbox[1][k] = bbox[1][k].max(p[k]);
        }
    }
    eprintln!(
        "min {:.6e} on {} grid points in [{}, {}] x [{}, {}]",
        grid.min_value,
        grid.points.len(),
        bbox[0][0],
        bbox[1][0],
        bbox[0][1],
        bbox[1][1]
    );
    let out = GridOutput {
        min_value: grid.min_value,
        step: grid.step(),
        count: grid.points.len(),
        bounding_box: bbox,
        points: a.points.then(|| grid.points.clone()),
    };
    let conf = GridConfig { input: &a.io.input, ell: ell.vector(), norm, lo, hi, resolution: a.resolution };
    emit_json(a.io.out.as_deref(), &envelope(conf, out))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| e.downcast_ref::<geoquant::Error>().is_some_and(|g| g.is_numerical()));
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Univariate(a) => univariate(a),
        Command::Infer(a) => infer(a),
        Command::Simulate(a) => simulate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::TaylorSweep(a) => taylor_sweep(a),
        Command::GridOracle(a) => grid_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
