//! Benchmark harness: builds problems from declarative configs, runs the
//! optimizer and the baselines under uniform effective-pass accounting,
//! and writes convergence traces (CSV) plus a run summary (JSON). Also
//! measures optimizer-only overhead scaling across problem sizes and
//! merges trace directories into a single long-form table for plotting.
//!
//! Accounting rules: the harness counts subfunction evaluations through
//! [`CountingObjective`]; one effective pass is `N` evaluations. Sampling
//! the full objective for a trace goes straight to the underlying problem
//! and never inflates a run's budget.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    default_grid, default_momentum_grid, run_trace_with, BaselineConfig, BaselineMethod, Runner,
    RunnerError, TracePoint,
};
use crate::optimizer::{SelectionRule, Sfo, SfoConfig, SfoError};
use crate::problem::{
    check_gradient, make_logistic_regression, make_quadratic_ensemble, CheapQuadratic,
    CountingObjective, LogisticRegression, Objective, ProblemError, QuadraticEnsemble,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error(transparent)]
    Sfo(#[from] SfoError),
    #[error("trace merge failed: duplicate run ids: {0:?}")]
    DuplicateRunIds(Vec<String>),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Which builtin problem a benchmark runs on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Quadratic {
        seed: u64,
        m: usize,
        n: usize,
        condition_number: f64,
    },
    Logistic {
        seed: u64,
        d: usize,
        feature_dim: usize,
        n: usize,
        l2: f64,
    },
}

fn default_history() -> usize {
    10
}

/// One optimizer entry of a run config. Grid-searched methods may override
/// their default hyperparameter grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sfo {
        #[serde(default)]
        selection: SelectionRule,
    },
    Sgd {
        #[serde(default)]
        steps: Option<Vec<f64>>,
    },
    SgdMomentum {
        #[serde(default)]
        steps: Option<Vec<f64>>,
        #[serde(default)]
        momenta: Option<Vec<f64>>,
    },
    #[serde(rename = "adagrad")]
    AdaGrad {
        #[serde(default)]
        steps: Option<Vec<f64>>,
    },
    Sag {
        #[serde(default)]
        steps: Option<Vec<f64>>,
    },
    Lbfgs {
        #[serde(default = "default_history")]
        history_length: usize,
    },
}

impl OptimizerSpec {
    pub fn method_name(&self) -> &'static str {
        match self {
            OptimizerSpec::Sfo { .. } => "sfo",
            OptimizerSpec::Sgd { .. } => "sgd",
            OptimizerSpec::SgdMomentum { .. } => "sgd_momentum",
            OptimizerSpec::AdaGrad { .. } => "adagrad",
            OptimizerSpec::Sag { .. } => "sag",
            OptimizerSpec::Lbfgs { .. } => "lbfgs",
        }
    }
}

/// A complete, serializable benchmark description. Re-running a persisted
/// config reproduces every numeric column of the traces bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub problem: ProblemSpec,
    pub optimizers: Vec<OptimizerSpec>,
    /// Budget per run, in effective passes.
    pub passes: f64,
    /// Steps between full-objective samples.
    pub trace_interval: usize,
    /// Global seed for optimizer randomness.
    pub seed: u64,
    /// Dump the generated dataset next to the traces (logistic only).
    #[serde(default)]
    pub dump_dataset: bool,
}

/// The spec's supported config schema version.
pub const SCHEMA_VERSION: u32 = 1;

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, BenchError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(BenchError::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.optimizers.is_empty() {
            return Err(BenchError::Config("no optimizers configured".into()));
        }
        if !(self.passes >= 0.0) {
            return Err(BenchError::Config("pass budget must be >= 0".into()));
        }
        match &self.problem {
            ProblemSpec::Quadratic {
                m, n, condition_number, ..
            } => {
                if *m == 0 || *n == 0 || !(*condition_number >= 1.0) {
                    return Err(BenchError::Config("invalid quadratic problem spec".into()));
                }
            }
            ProblemSpec::Logistic {
                d, feature_dim, n, l2, ..
            } => {
                if *feature_dim == 0 || *n == 0 || d < n || *l2 < 0.0 {
                    return Err(BenchError::Config("invalid logistic problem spec".into()));
                }
            }
        }
        Ok(())
    }

    /// The default desk-scale benchmark: logistic regression, D = 2000,
    /// 100 features, N = 20 minibatches, 30 passes, all optimizers.
    pub fn default_benchmark() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            problem: ProblemSpec::Logistic {
                seed: 3,
                d: 2000,
                feature_dim: 100,
                n: 20,
                l2: 1e-3,
            },
            optimizers: vec![
                OptimizerSpec::Sfo {
                    selection: SelectionRule::MaxDistance,
                },
                OptimizerSpec::Sgd { steps: None },
                OptimizerSpec::SgdMomentum {
                    steps: None,
                    momenta: None,
                },
                OptimizerSpec::AdaGrad { steps: None },
                OptimizerSpec::Sag { steps: None },
                OptimizerSpec::Lbfgs { history_length: 10 },
            ],
            passes: 30.0,
            trace_interval: 20,
            seed: 0,
            dump_dataset: false,
        }
    }
}

/// A constructed problem plus where its reference optimum came from.
pub struct BuiltProblem {
    pub objective: Box<dyn Objective>,
    pub f_star: Option<f64>,
    pub f_star_source: &'static str,
    logistic: Option<LogisticRegression>,
}

impl BuiltProblem {
    pub fn dataset(&self) -> Option<&crate::problem::DatasetSplit> {
        self.logistic.as_ref().map(|l| l.dataset())
    }
}

/// Builds the problem named by a spec. Logistic problems with a positive
/// penalty get their optimum derived by the full-batch descent oracle, so
/// traces can report `F − F*` against it.
pub fn build_problem(spec: &ProblemSpec) -> Result<BuiltProblem, BenchError> {
    match spec {
        ProblemSpec::Quadratic {
            seed,
            m,
            n,
            condition_number,
        } => {
            let p: QuadraticEnsemble = make_quadratic_ensemble(*seed, *m, *n, *condition_number)?;
            let f_star = p.analytic_optimum().map(|(_, f)| f);
            Ok(BuiltProblem {
                objective: Box::new(p),
                f_star,
                f_star_source: "analytic",
                logistic: None,
            })
        }
        ProblemSpec::Logistic {
            seed,
            d,
            feature_dim,
            n,
            l2,
        } => {
            let mut p = make_logistic_regression(*seed, *d, *feature_dim, *n, *l2)?;
            let (f_star, source) = if *l2 > 0.0 {
                p.derive_optimum(1e-10, 1_000_000)?;
                (p.analytic_optimum().map(|(_, f)| f), "derived")
            } else {
                (None, "best_achieved")
            };
            Ok(BuiltProblem {
                objective: Box::new(p.clone()),
                f_star,
                f_star_source: source,
                logistic: Some(p),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Benchmark running
// ---------------------------------------------------------------------------

/// One row of a convergence trace, exactly as serialized to CSV.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub run_id: String,
    pub optimizer: String,
    pub hyperparams: String,
    pub step: u64,
    pub effective_passes: f64,
    pub objective: f64,
    pub objective_minus_fstar: Option<f64>,
    pub wall_seconds: f64,
}

pub const TRACE_HEADER: [&str; 8] = [
    "run_id",
    "optimizer",
    "hyperparams",
    "step",
    "effective_passes",
    "objective",
    "objective_minus_fstar",
    "wall_seconds",
];

/// 17-significant-digit serialization used for every float column.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

struct CellResult {
    run_id: String,
    optimizer: String,
    hyperparams: String,
    trace: Vec<TracePoint>,
    failed: Option<String>,
}

/// Per-run summary entry in the JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub optimizer: String,
    pub hyperparams: String,
    pub final_objective: Option<f64>,
    pub final_passes: Option<f64>,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestChoice {
    pub run_id: String,
    pub hyperparams: String,
    pub final_objective: f64,
}

/// Extra diagnostics for the sum-of-functions optimizer's run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SfoDiagnostics {
    pub bad_updates: u64,
    pub collapses: u64,
    pub active_set_trace: Vec<(u64, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub schema_version: u32,
    pub f_star: Option<f64>,
    pub f_star_source: String,
    pub runs: Vec<RunSummary>,
    pub best_per_method: BTreeMap<String, BestChoice>,
    pub sfo: Option<SfoDiagnostics>,
    pub note: Option<String>,
}

struct SfoAdapter {
    inner: Sfo,
}

impl Runner for SfoAdapter {
    fn step(&mut self, problem: &dyn Objective) -> Result<(), RunnerError> {
        self.inner.step(problem)?;
        Ok(())
    }

    fn current_x(&self) -> DVector<f64> {
        self.inner.current_x()
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

fn grid_for(spec: &OptimizerSpec, seed: u64) -> Vec<BaselineConfig> {
    match spec {
        OptimizerSpec::Sgd { steps } | OptimizerSpec::AdaGrad { steps } | OptimizerSpec::Sag { steps } => {
            let method = match spec {
                OptimizerSpec::Sgd { .. } => BaselineMethod::Sgd,
                OptimizerSpec::AdaGrad { .. } => BaselineMethod::AdaGrad,
                _ => BaselineMethod::Sag,
            };
            match steps {
                Some(steps) => steps
                    .iter()
                    .map(|&s| {
                        let mut c = BaselineConfig::new(method, s);
                        c.seed = seed;
                        c
                    })
                    .collect(),
                None => default_grid(method, seed),
            }
        }
        OptimizerSpec::SgdMomentum { steps, momenta } => {
            let steps = steps
                .clone()
                .unwrap_or_else(crate::baselines::default_step_grid);
            let momenta = momenta.clone().unwrap_or_else(default_momentum_grid);
            let mut grid = Vec::new();
            for &s in &steps {
                for &m in &momenta {
                    let mut c = BaselineConfig::new(BaselineMethod::SgdMomentum, s);
                    c.momentum = m;
                    c.seed = seed;
                    grid.push(c);
                }
            }
            grid
        }
        OptimizerSpec::Lbfgs { history_length } => {
            let mut c = BaselineConfig::new(BaselineMethod::Lbfgs, 1.0);
            c.history_length = *history_length;
            c.seed = seed;
            vec![c]
        }
        OptimizerSpec::Sfo { .. } => Vec::new(),
    }
}

/// Runs every configured optimizer cell on the problem from the config and
/// writes one CSV per run plus `summary.json` into `out_dir`.
///
/// The reference value `F*` prefers the problem's analytic or derived
/// optimum and falls back to the smallest objective achieved by any run. A
/// failing cell is recorded in the summary while the remaining runs
/// proceed. With a zero pass budget the CSVs contain only headers.
pub fn run_benchmark(config: &RunConfig, out_dir: &Path) -> Result<BenchmarkSummary, BenchError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    // Surface unwritable output directories before any work happens.
    let probe = out_dir.join(".write_probe");
    fs::write(&probe, b"probe")?;
    fs::remove_file(&probe)?;

    let built = build_problem(&config.problem)?;
    let problem: &dyn Objective = built.objective.as_ref();
    let dim = problem.dimension();
    let n = problem.subfunction_count();

    if config.dump_dataset {
        if let Some(dataset) = built.dataset() {
            dataset.dump_csv(&out_dir.join("dataset.csv"))?;
        }
    }

    let mut cells: Vec<CellResult> = Vec::new();
    let mut sfo_diag: Option<SfoDiagnostics> = None;
    let mut run_index = 0usize;

    for spec in &config.optimizers {
        match spec {
            OptimizerSpec::Sfo { selection } => {
                let run_id = format!("run{run_index:02}_sfo");
                run_index += 1;
                let counting = CountingObjective::new(problem);
                let sfo_config = SfoConfig {
                    seed: config.seed,
                    selection: *selection,
                    ..SfoConfig::default()
                };
                let result = (|| -> Result<(Vec<TracePoint>, SfoDiagnostics), BenchError> {
                    let mut adapter = SfoAdapter {
                        inner: Sfo::new(&counting, sfo_config)?,
                    };
                    let trace = if config.passes > 0.0 {
                        run_trace_with(
                            &counting,
                            problem,
                            config.passes,
                            config.trace_interval,
                            &mut adapter,
                        )?
                    } else {
                        Vec::new()
                    };
                    let collapses = adapter.inner.subspace().generation();
                    Ok((
                        trace,
                        SfoDiagnostics {
                            bad_updates: adapter.inner.bad_update_count(),
                            collapses,
                            active_set_trace: adapter.inner.growth_trace(),
                        },
                    ))
                })();
                match result {
                    Ok((trace, diag)) => {
                        sfo_diag = Some(diag);
                        cells.push(CellResult {
                            run_id,
                            optimizer: "sfo".into(),
                            hyperparams: "default".into(),
                            trace,
                            failed: None,
                        });
                    }
                    Err(e) => cells.push(CellResult {
                        run_id,
                        optimizer: "sfo".into(),
                        hyperparams: "default".into(),
                        trace: Vec::new(),
                        failed: Some(e.to_string()),
                    }),
                }
            }
            other => {
                for cell_config in grid_for(other, config.seed) {
                    let hyper = cell_config.hyperparams();
                    let run_id = format!(
                        "run{run_index:02}_{}_{}",
                        other.method_name(),
                        sanitize(&hyper)
                    );
                    run_index += 1;
                    let counting = CountingObjective::new(problem);
                    let mut runner = cell_config.make_runner(dim, n);
                    let outcome = if config.passes > 0.0 {
                        run_trace_with(
                            &counting,
                            problem,
                            config.passes,
                            config.trace_interval,
                            runner.as_mut(),
                        )
                    } else {
                        Ok(Vec::new())
                    };
                    match outcome {
                        Ok(trace) => cells.push(CellResult {
                            run_id,
                            optimizer: other.method_name().into(),
                            hyperparams: hyper,
                            trace,
                            failed: None,
                        }),
                        Err(RunnerError::Problem(ProblemError::NonFiniteOutput)) => {
                            cells.push(CellResult {
                                run_id,
                                optimizer: other.method_name().into(),
                                hyperparams: hyper,
                                trace: Vec::new(),
                                failed: Some("objective diverged to non-finite values".into()),
                            })
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
    }

    // F*: analytic/derived optimum takes precedence; otherwise the smallest
    // objective any optimizer achieved.
    let f_star = built.f_star.or_else(|| {
        cells
            .iter()
            .flat_map(|c| c.trace.iter().map(|p| p.objective))
            .filter(|v| v.is_finite())
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            })
    });

    for cell in &cells {
        let path = out_dir.join(format!("{}.csv", cell.run_id));
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(TRACE_HEADER)?;
        for p in &cell.trace {
            writer.write_record([
                cell.run_id.as_str(),
                cell.optimizer.as_str(),
                cell.hyperparams.as_str(),
                &p.step.to_string(),
                &format_float(p.effective_passes),
                &format_float(p.objective),
                &f_star
                    .map(|f| format_float(p.objective - f))
                    .unwrap_or_default(),
                &format_float(p.wall_seconds),
            ])?;
        }
        writer.flush()?;
    }

    let mut best_per_method: BTreeMap<String, BestChoice> = BTreeMap::new();
    for cell in &cells {
        let Some(last) = cell.trace.last() else {
            continue;
        };
        if !last.objective.is_finite() {
            continue;
        }
        let better = match best_per_method.get(&cell.optimizer) {
            Some(best) => last.objective < best.final_objective,
            None => true,
        };
        if better {
            best_per_method.insert(
                cell.optimizer.clone(),
                BestChoice {
                    run_id: cell.run_id.clone(),
                    hyperparams: cell.hyperparams.clone(),
                    final_objective: last.objective,
                },
            );
        }
    }

    let summary = BenchmarkSummary {
        schema_version: SCHEMA_VERSION,
        f_star,
        f_star_source: built.f_star_source.to_string(),
        runs: cells
            .iter()
            .map(|c| RunSummary {
                run_id: c.run_id.clone(),
                optimizer: c.optimizer.clone(),
                hyperparams: c.hyperparams.clone(),
                final_objective: c.trace.last().map(|p| p.objective),
                final_passes: c.trace.last().map(|p| p.effective_passes),
                failed: c.failed.clone(),
            })
            .collect(),
        best_per_method,
        sfo: sfo_diag,
        note: (config.passes <= 0.0).then(|| "zero pass budget: runs are empty".to_string()),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(out_dir.join("summary.json"), json)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Overhead measurement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct OverheadCell {
    pub m: usize,
    pub n: usize,
    pub passes: f64,
    /// Median wall seconds per effective pass, optimizer plus evaluations.
    pub total_seconds_per_pass: f64,
    /// Median seconds of one subfunction evaluation, measured in isolation.
    pub eval_seconds: f64,
    /// Optimizer-only seconds per pass (evaluation time subtracted).
    pub overhead_seconds_per_pass: f64,
    /// Timing spread across repeats exceeded the noise threshold.
    pub unreliable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    /// Swept axis: "m" or "n".
    pub axis: &'static str,
    /// The fixed value of the other axis.
    pub fixed: usize,
    /// Least-squares slope of ln(overhead) against ln(axis); absent for
    /// degenerate single-point sweeps.
    pub slope: Option<f64>,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverheadReport {
    pub cells: Vec<OverheadCell>,
    pub fits: Vec<SlopeFit>,
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in points {
        let lx = x.ln();
        let ly = y.max(f64::MIN_POSITIVE).ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    (denom.abs() > 1e-12).then(|| (n * sxy - sx * sy) / denom)
}

/// Measures optimizer-only wall time per effective pass on a trivially
/// cheap problem over every `(m, n)` in the cross product of the given
/// lists, subtracting the measured evaluation cost, and fits log-log
/// scaling slopes along each axis (expected: ≈1 in `m`, ≈2 in `n`).
///
/// Timings are medians over `repeats` measured runs on a monotonic clock;
/// spreads beyond 50% of the median mark the cell unreliable (slopes are
/// still fitted and reported).
pub fn measure_overhead(
    m_list: &[usize],
    n_list: &[usize],
    passes: f64,
    repeats: usize,
) -> Result<OverheadReport, BenchError> {
    if m_list.is_empty() || n_list.is_empty() {
        return Err(BenchError::Config(
            "overhead measurement needs at least one m and one n".into(),
        ));
    }
    if !(passes > 0.0) {
        return Err(BenchError::Config("pass budget must be positive".into()));
    }
    let repeats = repeats.max(1);
    let mut cells = Vec::new();
    for &n in n_list {
        for &m in m_list {
            let problem = CheapQuadratic::new(m, n)?;
            let steps_per_run = ((passes * n as f64).ceil() as usize).max(1);

            // Isolated evaluation cost at a representative point: median
            // over repeats of a small timed batch.
            let probe_x = DVector::from_element(m, 0.1);
            let mut eval_times = Vec::with_capacity(repeats);
            let batch = 16.max(200_000 / m.max(1));
            for _ in 0..repeats {
                let t0 = Instant::now();
                for k in 0..batch {
                    let e = problem.eval(k % n, &probe_x)?;
                    std::hint::black_box(e.value);
                }
                eval_times.push(t0.elapsed().as_secs_f64() / batch as f64);
            }
            let eval_seconds = median_of(eval_times);

            // One warmup run lets the subspace reach steady state before
            // timing starts.
            let mut totals = Vec::with_capacity(repeats);
            let mut sfo = Sfo::new(&problem, SfoConfig::default())?;
            for _ in 0..steps_per_run {
                sfo.step(&problem)?;
            }
            for _ in 0..repeats {
                let t0 = Instant::now();
                for _ in 0..steps_per_run {
                    sfo.step(&problem)?;
                }
                totals.push(t0.elapsed().as_secs_f64() / passes);
            }
            let total = median_of(totals.clone());
            let spread = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - totals.iter().cloned().fold(f64::INFINITY, f64::min);
            let unreliable = spread > 0.5 * total;
            let overhead =
                (total - eval_seconds * n as f64 * passes.max(1.0) / passes).max(f64::MIN_POSITIVE);
            cells.push(OverheadCell {
                m,
                n,
                passes,
                total_seconds_per_pass: total,
                eval_seconds,
                overhead_seconds_per_pass: overhead,
                unreliable,
            });
        }
    }

    let mut fits = Vec::new();
    for &n in n_list {
        let points: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.n == n)
            .map(|c| (c.m as f64, c.overhead_seconds_per_pass))
            .collect();
        fits.push(SlopeFit {
            axis: "m",
            fixed: n,
            slope: log_log_slope(&points),
            points: points.len(),
        });
    }
    for &m in m_list {
        let points: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.m == m)
            .map(|c| (c.n as f64, c.overhead_seconds_per_pass))
            .collect();
        fits.push(SlopeFit {
            axis: "n",
            fixed: m,
            slope: log_log_slope(&points),
            points: points.len(),
        });
    }
    Ok(OverheadReport { cells, fits })
}

/// Writes the overhead cells and slope fits as two CSV files in `out_dir`
/// (`overhead.csv`, `overhead_fits.csv`).
pub fn write_overhead_report(report: &OverheadReport, out_dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("overhead.csv"))?;
    w.write_record([
        "m",
        "n",
        "passes",
        "total_seconds_per_pass",
        "eval_seconds",
        "overhead_seconds_per_pass",
        "unreliable",
    ])?;
    for c in &report.cells {
        w.write_record([
            c.m.to_string(),
            c.n.to_string(),
            format_float(c.passes),
            format_float(c.total_seconds_per_pass),
            format_float(c.eval_seconds),
            format_float(c.overhead_seconds_per_pass),
            c.unreliable.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join("overhead_fits.csv"))?;
    w.write_record(["axis", "fixed", "slope", "points"])?;
    for f in &report.fits {
        w.write_record([
            f.axis.to_string(),
            f.fixed.to_string(),
            f.slope.map(format_float).unwrap_or_else(|| "na".into()),
            f.points.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Plot-data merging
// ---------------------------------------------------------------------------

/// Merges every trace CSV in `trace_dir` into one long-form table at
/// `out_path`, adding an `is_best` column marking, per optimizer, the run
/// with the lowest final objective (matching the grid-search rule). Errors
/// if the same run id appears in more than one file.
pub fn emit_plot_data(trace_dir: &Path, out_path: &Path) -> Result<usize, BenchError> {
    let mut files: Vec<PathBuf> = fs::read_dir(trace_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();

    struct Row {
        fields: Vec<String>,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut seen_ids: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut duplicates: Vec<String> = Vec::new();

    for path in &files {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().ne(TRACE_HEADER) {
            // Not a trace file (summary, overhead, dataset); skip it.
            continue;
        }
        let mut ids_in_file: Vec<String> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let fields: Vec<String> = record.iter().map(|s| s.to_string()).collect();
            if !ids_in_file.contains(&fields[0]) {
                ids_in_file.push(fields[0].clone());
            }
            rows.push(Row { fields });
        }
        for id in ids_in_file {
            if let Some(_previous) = seen_ids.get(&id) {
                duplicates.push(id);
            } else {
                seen_ids.insert(id, path.clone());
            }
        }
    }
    if !duplicates.is_empty() {
        duplicates.sort();
        duplicates.dedup();
        return Err(BenchError::DuplicateRunIds(duplicates));
    }

    // Final objective per run (the row with the largest step), then the
    // best run per optimizer: lowest final objective, ties toward the
    // smaller step size parsed from the hyperparameter string.
    struct Final {
        optimizer: String,
        hyperparams: String,
        step: u64,
        objective: f64,
    }
    let mut finals: BTreeMap<String, Final> = BTreeMap::new();
    for row in &rows {
        let step: u64 = row.fields[3].parse().unwrap_or(0);
        let objective: f64 = row.fields[5].parse().unwrap_or(f64::INFINITY);
        let entry = finals.entry(row.fields[0].clone()).or_insert(Final {
            optimizer: row.fields[1].clone(),
            hyperparams: row.fields[2].clone(),
            step,
            objective,
        });
        if step >= entry.step {
            entry.step = step;
            entry.objective = objective;
        }
    }
    let parse_step = |hyper: &str| -> f64 {
        hyper
            .split(',')
            .find_map(|part| part.strip_prefix("step="))
            .and_then(|s| s.parse().ok())
            .unwrap_or(f64::INFINITY)
    };
    let mut best_per_method: BTreeMap<String, String> = BTreeMap::new();
    for (run_id, fin) in &finals {
        let better = match best_per_method.get(&fin.optimizer) {
            None => true,
            Some(current) => {
                let cur = &finals[current];
                fin.objective < cur.objective
                    || (fin.objective == cur.objective
                        && parse_step(&fin.hyperparams) < parse_step(&cur.hyperparams))
            }
        };
        if better {
            best_per_method.insert(fin.optimizer.clone(), run_id.clone());
        }
    }

    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(out_path)?;
    let mut header: Vec<&str> = TRACE_HEADER.to_vec();
    header.push("is_best");
    writer.write_record(&header)?;
    let count = rows.len();
    for row in &rows {
        let is_best = best_per_method
            .get(&finals[&row.fields[0]].optimizer)
            .is_some_and(|id| *id == row.fields[0]);
        let mut fields = row.fields.clone();
        fields.push(is_best.to_string());
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(count)
}

// ---------------------------------------------------------------------------
// Gradient checking entry point
// ---------------------------------------------------------------------------

/// Checks every subfunction's analytic gradient against central finite
/// differences at `trials` random points, returning the worst relative
/// error observed.
pub fn gradcheck_problem(spec: &ProblemSpec, seed: u64, trials: usize) -> Result<f64, BenchError> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let built = build_problem(spec)?;
    let problem = built.objective.as_ref();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut worst = 0.0f64;
    for t in 0..trials {
        let x = DVector::from_fn(problem.dimension(), |_, _| normal.sample(&mut rng));
        let i = t % problem.subfunction_count();
        worst = worst.max(check_gradient(problem, i, &x, 1e-6)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> RunConfig {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            problem: ProblemSpec::Quadratic {
                seed: 5,
                m: 6,
                n: 4,
                condition_number: 10.0,
            },
            optimizers: vec![
                OptimizerSpec::Sfo {
                    selection: SelectionRule::MaxDistance,
                },
                OptimizerSpec::Sgd {
                    steps: Some(vec![1e-3, 1e-2]),
                },
            ],
            passes: 3.0,
            trace_interval: 2,
            seed: 1,
            dump_dataset: false,
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = RunConfig::default_benchmark();
        let text = config.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.passes, config.passes);
        assert_eq!(back.optimizers.len(), config.optimizers.len());
    }

    #[test]
    fn config_validation_rejects_bad_specs() {
        let mut config = tiny_config();
        config.schema_version = 99;
        assert!(matches!(
            config.validate(),
            Err(BenchError::Config(_))
        ));
        let mut config = tiny_config();
        config.optimizers.clear();
        assert!(config.validate().is_err());
    }

    #[test]
    fn benchmark_produces_traces_and_summary() {
        let dir = tempdir().unwrap();
        let summary = run_benchmark(&tiny_config(), dir.path()).unwrap();
        assert_eq!(summary.runs.len(), 3); // sfo + two sgd cells
        assert!(summary.f_star.is_some());
        assert_eq!(summary.f_star_source, "analytic");
        assert!(summary.sfo.is_some());
        let sfo_csv = dir.path().join("run00_sfo.csv");
        assert!(sfo_csv.exists());
        let content = std::fs::read_to_string(&sfo_csv).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert!(lines.len() > 2);
        assert!(lines[0].starts_with("run_id,optimizer,hyperparams,step"));
        // Effective passes are non-decreasing within the run.
        let mut prev = -1.0f64;
        for line in &lines[1..] {
            let passes: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
            assert!(passes >= prev);
            prev = passes;
        }
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn zero_pass_budget_writes_header_only_csvs() {
        let dir = tempdir().unwrap();
        let mut config = tiny_config();
        config.passes = 0.0;
        let summary = run_benchmark(&config, dir.path()).unwrap();
        assert!(summary.note.is_some());
        let content = std::fs::read_to_string(dir.path().join("run00_sfo.csv")).unwrap();
        assert_eq!(content.lines().count(), 1);
    }

    #[test]
    fn rerun_with_same_config_is_deterministic_modulo_wall_time() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        run_benchmark(&tiny_config(), dir_a.path()).unwrap();
        run_benchmark(&tiny_config(), dir_b.path()).unwrap();
        for entry in std::fs::read_dir(dir_a.path()).unwrap() {
            let path_a = entry.unwrap().path();
            if path_a.extension().is_none_or(|e| e != "csv") {
                continue;
            }
            let path_b = dir_b.path().join(path_a.file_name().unwrap());
            let a = std::fs::read_to_string(&path_a).unwrap();
            let b = std::fs::read_to_string(&path_b).unwrap();
            for (la, lb) in a.lines().zip(b.lines()) {
                let fa: Vec<&str> = la.split(',').collect();
                let fb: Vec<&str> = lb.split(',').collect();
                assert_eq!(fa.len(), fb.len());
                // All columns except wall_seconds (the last) match exactly.
                assert_eq!(fa[..fa.len() - 1], fb[..fb.len() - 1]);
            }
        }
    }

    #[test]
    fn plot_data_merges_runs_and_marks_best() {
        let dir = tempdir().unwrap();
        run_benchmark(&tiny_config(), dir.path()).unwrap();
        let out = dir.path().join("merged").join("plot.csv");
        let merged_rows = emit_plot_data(dir.path(), &out).unwrap();
        let content = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert_eq!(lines.len(), merged_rows + 1);
        assert!(lines[0].ends_with("is_best"));
        // Exactly one best run per optimizer present.
        let mut best_ids: Vec<(&str, &str)> = lines[1..]
            .iter()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[1], f[0])
            })
            .filter(|_| true)
            .collect();
        best_ids.dedup();
        let summary: BenchmarkSummary = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        for l in &lines[1..] {
            let f: Vec<&str> = l.split(',').collect();
            let is_best: bool = f[8].parse().unwrap();
            if is_best {
                let expected = &summary.best_per_method[f[1]];
                assert_eq!(expected.run_id, f[0]);
            }
        }
    }

    #[test]
    fn plot_data_rejects_duplicate_run_ids() {
        let dir = tempdir().unwrap();
        run_benchmark(&tiny_config(), dir.path()).unwrap();
        // Duplicate one trace file under a different name.
        let src = dir.path().join("run00_sfo.csv");
        let dup = dir.path().join("zz_copy.csv");
        std::fs::copy(&src, &dup).unwrap();
        let out = dir.path().join("plot.csv");
        match emit_plot_data(dir.path(), &out) {
            Err(BenchError::DuplicateRunIds(ids)) => {
                assert_eq!(ids, vec!["run00_sfo".to_string()]);
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn single_run_merges_to_itself() {
        let dir = tempdir().unwrap();
        let mut config = tiny_config();
        config.optimizers = vec![OptimizerSpec::Sfo {
            selection: SelectionRule::MaxDistance,
        }];
        run_benchmark(&config, dir.path()).unwrap();
        let out = dir.path().join("plot.csv");
        let rows = emit_plot_data(dir.path(), &out).unwrap();
        let content = std::fs::read_to_string(&out).unwrap();
        assert_eq!(content.lines().count(), rows + 1);
        for line in content.lines().skip(1) {
            assert!(line.ends_with("true"));
        }
    }

    #[test]
    fn overhead_report_shapes_and_degenerate_slopes() {
        let report = measure_overhead(&[200], &[4, 8], 0.5, 2).unwrap();
        assert_eq!(report.cells.len(), 2);
        // Single m point: slope in m is not available.
        let m_fits: Vec<_> = report.fits.iter().filter(|f| f.axis == "m").collect();
        assert!(m_fits.iter().all(|f| f.slope.is_none() && f.points == 1));
        let n_fit = report.fits.iter().find(|f| f.axis == "n").unwrap();
        assert_eq!(n_fit.points, 2);
        assert!(n_fit.slope.is_some());
        let dir = tempdir().unwrap();
        write_overhead_report(&report, dir.path()).unwrap();
        let fits = std::fs::read_to_string(dir.path().join("overhead_fits.csv")).unwrap();
        assert!(fits.contains("na"));
    }

    #[test]
    fn floats_serialize_with_17_significant_digits() {
        let s = format_float(std::f64::consts::PI);
        assert_eq!(s, "3.1415926535897931e0");
        let parsed: f64 = s.parse().unwrap();
        assert_eq!(parsed, std::f64::consts::PI);
    }

    #[test]
    fn gradcheck_passes_on_builtin_problems() {
        let spec = ProblemSpec::Quadratic {
            seed: 2,
            m: 5,
            n: 3,
            condition_number: 20.0,
        };
        let worst = gradcheck_problem(&spec, 0, 30).unwrap();
        assert!(worst <= 1e-5);
    }
}
