//! Seeded sweeps over `ε`, CSV output and log-log slope fitting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqr::{self, AreOptions, CostSpec, RiccatiSolution, SystemModel};
use crate::matrix::PdMatrix;
use crate::rollout::InitialStateModel;
use crate::seeding;
use crate::solver::{self, GradientSource, IterationRule, KInitRule, Problem, RhpgConfig, RhpgResult, Schedule, ScheduleVariant, Xi1Form};

/// How much of the model the harness may consult.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Scalar-experiment reproduction: the ARE is solved up front, gaps are
    /// reported and `N = ⌈½ ln(1/ε)⌉`.
    #[default]
    Experiment,
    /// Model-free use: `N` from the accuracy bound and no exact stage optimum
    /// in the schedule constants.
    Practical,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "experiment" => Ok(Self::Experiment),
            "practical" => Ok(Self::Practical),
            other => Err(Error::config("mode", format!("expected experiment or practical, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorizonRule {
    LogInverseEps,
    AccuracyBound,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IterationMode {
    /// Stage lengths from the convergence analysis; guarded by a call budget.
    Theory,
    /// Step sizes and lengths from the `[tuned]` section.
    #[default]
    Tuned,
}

/// A validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: SystemModel,
    pub cost: CostSpec,
    pub init: InitialStateModel,
    pub sigma: f64,
    pub delta_total: f64,
    pub eps_list: Vec<f64>,
    pub runs_per_eps: u64,
    pub base_seed: u64,
    pub mode: Mode,
    pub variant: ScheduleVariant,
    pub k_init: KInitRule,
    pub horizon: HorizonRule,
    pub iterations: IterationMode,
    pub xi1_form: Xi1Form,
    pub max_oracle_calls: u64,
    pub mu: Option<f64>,
    pub theta: f64,
    pub iteration_scale: f64,
    pub stage_iterations: Option<Vec<u64>>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    instance: RawInstance,
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    tuned: RawTuned,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    q_terminal: Vec<Vec<f64>>,
    sigma0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawHorizon {
    Named(String),
    Fixed(i64),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRun {
    sigma: f64,
    delta_total: f64,
    eps_list: Vec<f64>,
    runs_per_eps: i64,
    base_seed: u64,
    mode: String,
    schedule: String,
    k_init: String,
    horizon: Option<RawHorizon>,
    iterations: String,
    xi1_form: String,
    max_oracle_calls: f64,
    output: Option<PathBuf>,
}

impl Default for RawRun {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            delta_total: 0.1,
            eps_list: default_eps_list(),
            runs_per_eps: 100,
            base_seed: 0,
            mode: "experiment".into(),
            schedule: "riemannian".into(),
            k_init: "zero".into(),
            horizon: None,
            iterations: "tuned".into(),
            xi1_form: "squared".into(),
            max_oracle_calls: 1e9,
            output: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTuned {
    mu: Option<f64>,
    theta: f64,
    iteration_scale: f64,
    stage_iterations: Option<Vec<u64>>,
}

impl Default for RawTuned {
    fn default() -> Self {
        Self {
            mu: None,
            theta: 5000.0,
            iteration_scale: 400.0,
            stage_iterations: None,
        }
    }
}

/// `10^{-0.5}, 10^{-1}, …, 10^{-6}`.
pub fn default_eps_list() -> Vec<f64> {
    (1..=12).map(|i| 10f64.powf(-0.5 * i as f64)).collect()
}

fn nested_to_matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(Error::config(field, "matrix must be non-empty"));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(Error::config(
            field,
            format!("row {bad} has {} entries, expected {cols}", rows[bad].len()),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(field, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn nested_to_pd(field: &str, rows: &[Vec<f64>]) -> Result<PdMatrix> {
    PdMatrix::new(nested_to_matrix(field, rows)?).map_err(|e| Error::config(field, e.to_string()))
}

fn parse_field<T: std::str::FromStr<Err = Error>>(field: &str, s: &str) -> Result<T> {
    s.parse().map_err(|e: Error| match e {
        Error::InvalidParameter { reason, .. } | Error::Config { reason, .. } => Error::config(field, reason),
        other => Error::config(field, other.to_string()),
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// The scalar instance `A = 5, B = 0.33, Q = R = 1, Q_N = 300, Σ0 = 1`
    /// with the default run settings.
    pub fn scalar_default() -> Self {
        Self::from_toml_str(SCALAR_INSTANCE).expect("built-in config is valid")
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let inst = raw.instance;
        let a = nested_to_matrix("instance.a", &inst.a)?;
        let b = nested_to_matrix("instance.b", &inst.b)?;
        let model = SystemModel::new(a, b).map_err(|e| Error::config("instance.b", e.to_string()))?;
        let n = model.state_dim();
        let q = nested_to_pd("instance.q", &inst.q)?;
        let r = nested_to_pd("instance.r", &inst.r)?;
        let q_n = nested_to_pd("instance.q_terminal", &inst.q_terminal)?;
        let sigma0 = match &inst.sigma0 {
            Some(rows) => nested_to_pd("instance.sigma0", rows)?,
            None => PdMatrix::identity(n),
        };
        if sigma0.dim() != n {
            return Err(Error::config("instance.sigma0", format!("expected {n}x{n}, found {0}x{0}", sigma0.dim())));
        }
        let cost = CostSpec::new(q, r, q_n).map_err(|e| Error::config("instance", e.to_string()))?;
        cost.check(&model).map_err(|e| Error::config("instance", e.to_string()))?;
        let init = InitialStateModel::sphere(sigma0);

        let run = raw.run;
        if !(run.sigma > 0.0 && run.sigma.is_finite()) {
            return Err(Error::config("run.sigma", "must be positive"));
        }
        if !(run.delta_total > 0.0 && run.delta_total < 1.0) {
            return Err(Error::config("run.delta_total", "must lie in (0, 1)"));
        }
        if run.eps_list.is_empty() {
            return Err(Error::config("run.eps_list", "must not be empty"));
        }
        if let Some(bad) = run.eps_list.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::config("run.eps_list", format!("entries must be positive, found {bad}")));
        }
        if run.runs_per_eps < 1 {
            return Err(Error::config("run.runs_per_eps", "must be at least 1"));
        }
        let mode: Mode = parse_field("run.mode", &run.mode)?;
        let horizon = match run.horizon {
            None => match mode {
                Mode::Experiment => HorizonRule::LogInverseEps,
                Mode::Practical => HorizonRule::AccuracyBound,
            },
            Some(RawHorizon::Named(s)) => match s.as_str() {
                "log-inverse-eps" => HorizonRule::LogInverseEps,
                "accuracy-bound" => HorizonRule::AccuracyBound,
                other => {
                    return Err(Error::config(
                        "run.horizon",
                        format!("expected log-inverse-eps, accuracy-bound or an integer, got {other:?}"),
                    ))
                }
            },
            Some(RawHorizon::Fixed(n)) if n >= 1 => HorizonRule::Fixed(n as usize),
            Some(RawHorizon::Fixed(n)) => return Err(Error::config("run.horizon", format!("must be at least 1, got {n}"))),
        };
        let iterations = match run.iterations.as_str() {
            "theory" => IterationMode::Theory,
            "tuned" => IterationMode::Tuned,
            other => return Err(Error::config("run.iterations", format!("expected theory or tuned, got {other:?}"))),
        };
        if !(run.max_oracle_calls >= 1.0) {
            return Err(Error::config("run.max_oracle_calls", "must be at least 1"));
        }

        let tuned = raw.tuned;
        if let Some(mu) = tuned.mu {
            if !(mu > 0.0) {
                return Err(Error::config("tuned.mu", "must be positive"));
            }
        }
        if !(tuned.theta > 0.0) {
            return Err(Error::config("tuned.theta", "must be positive"));
        }
        if !(tuned.iteration_scale > 0.0) {
            return Err(Error::config("tuned.iteration_scale", "must be positive"));
        }
        if let (Some(v), HorizonRule::Fixed(n)) = (&tuned.stage_iterations, horizon) {
            if v.len() != n {
                return Err(Error::config(
                    "tuned.stage_iterations",
                    format!("expected {n} entries, found {}", v.len()),
                ));
            }
        }

        Ok(Self {
            model,
            cost,
            init,
            sigma: run.sigma,
            delta_total: run.delta_total,
            eps_list: run.eps_list,
            runs_per_eps: run.runs_per_eps as u64,
            base_seed: run.base_seed,
            mode,
            variant: parse_field("run.schedule", &run.schedule)?,
            k_init: parse_field("run.k_init", &run.k_init)?,
            horizon,
            iterations,
            xi1_form: parse_field("run.xi1_form", &run.xi1_form)?,
            max_oracle_calls: run.max_oracle_calls as u64,
            mu: tuned.mu,
            theta: tuned.theta,
            iteration_scale: tuned.iteration_scale,
            stage_iterations: tuned.stage_iterations,
            output: run.output,
        })
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem {
            model: &self.model,
            cost: &self.cost,
            init: &self.init,
        }
    }

    /// The ARE solution: required in experiment mode, best effort otherwise.
    pub fn reference(&self) -> Result<Option<RiccatiSolution>> {
        match lqr::solve_are(&self.model, &self.cost, AreOptions::default()) {
            Ok(sol) => {
                if self.mode == Mode::Experiment && !self.cost.terminal_dominates(&sol.p_star)? {
                    log::info!("terminal weight does not dominate P*; the horizon guarantees do not apply");
                }
                Ok(Some(sol))
            }
            Err(e) if self.mode == Mode::Experiment => Err(e),
            Err(e) => {
                log::info!("no ARE solution, gaps will not be reported: {e}");
                Ok(None)
            }
        }
    }

    pub fn horizon_for(&self, eps: f64, reference: Option<&RiccatiSolution>) -> Result<usize> {
        match self.horizon {
            HorizonRule::LogInverseEps => lqr::horizon_log_rule(eps),
            HorizonRule::AccuracyBound => {
                let sol = reference.ok_or_else(|| Error::config("run.horizon", "accuracy-bound horizon needs a solvable ARE"))?;
                lqr::horizon_for_accuracy(sol, &self.model, &self.cost, eps)
            }
            HorizonRule::Fixed(n) => Ok(n),
        }
    }

    pub fn rhpg_config(&self, eps: f64, reference: Option<&RiccatiSolution>) -> Result<RhpgConfig> {
        let horizon = self.horizon_for(eps, reference)?;
        let schedule = match self.iterations {
            IterationMode::Theory => Schedule::Theory {
                xi1_form: self.xi1_form,
                max_oracle_calls: self.max_oracle_calls,
                exact_optimum: self.mode == Mode::Experiment,
            },
            IterationMode::Tuned => Schedule::Practical {
                mu: self.mu,
                theta: self.theta,
                iterations: match &self.stage_iterations {
                    Some(v) if v.len() == horizon => IterationRule::PerStage(v.clone()),
                    Some(v) => {
                        return Err(Error::config(
                            "tuned.stage_iterations",
                            format!("horizon is {horizon} at eps {eps}, found {} entries", v.len()),
                        ))
                    }
                    None => IterationRule::Scaled(self.iteration_scale),
                },
            },
        };
        Ok(RhpgConfig {
            horizon,
            eps,
            sigma: self.sigma,
            delta_total: self.delta_total,
            k_init: self.k_init,
            variant: self.variant,
            schedule,
            gradient: GradientSource::OnePoint,
            log_every: None,
        })
    }

    /// One run with seed `mix(base_seed, eps_index, run)`.
    pub fn solve(&self, eps_index: usize, run: u64, reference: Option<&RiccatiSolution>) -> Result<(RunRecord, RhpgResult)> {
        let eps = *self.eps_list.get(eps_index).ok_or_else(|| Error::param("eps_index", "out of range"))?;
        let cfg = self.rhpg_config(eps, reference)?;
        let seed = seeding::mix_seed(self.base_seed, eps_index as u64, run);
        let mut rng = seeding::rng_for(self.base_seed, eps_index as u64, run);
        let start = Instant::now();
        let result = solver::run_rhpg(self.problem(), &cfg, reference, &mut rng)?;
        let record = RunRecord {
            eps,
            run,
            seed,
            oracle_calls: result.total_oracle_calls,
            final_gap: result.final_gap,
            stabilizing: result.stabilizing,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        Ok((record, result))
    }
}

/// Maps a TOML error onto the dotted key it refers to, if recoverable.
fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "config".to_string()
}

/// The scalar instance and defaults as a config file.
pub const SCALAR_INSTANCE: &str = r#"[instance]
a = [[5.0]]
b = [[0.33]]
q = [[1.0]]
r = [[1.0]]
q_terminal = [[300.0]]
sigma0 = [[1.0]]
"#;

/// One row of the sweep output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub eps: f64,
    pub run: u64,
    pub seed: u64,
    pub oracle_calls: u64,
    /// `‖K̃_0 − K*‖`; empty when no reference solution exists.
    pub final_gap: Option<f64>,
    pub stabilizing: Option<bool>,
    pub wall_time_s: f64,
}

/// Per-`ε` averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub eps: f64,
    pub runs: u64,
    pub mean_oracle_calls: f64,
    pub mean_final_gap: Option<f64>,
    pub stabilizing_fraction: Option<f64>,
    /// Fraction of runs with gap at most `ε`.
    pub success_fraction: Option<f64>,
}

/// Runs every `(ε, run)` cell on `jobs` worker threads. Records come back in
/// `(ε index, run index)` order whatever the scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunRecord>> {
    let reference = cfg.reference()?;
    let runs = cfg.runs_per_eps as usize;
    let cells = cfg.eps_list.len() * runs;
    let jobs = jobs.clamp(1, cells.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..cells).map(|_| None).collect());
    let failed = std::sync::atomic::AtomicBool::new(false);

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let cell = next.fetch_add(1, Ordering::Relaxed);
                if cell >= cells || failed.load(Ordering::Relaxed) {
                    break;
                }
                let (ei, run) = (cell / runs, (cell % runs) as u64);
                let out = cfg.solve(ei, run, reference.as_ref()).map(|(rec, _)| rec);
                if let Ok(rec) = &out {
                    log::info!("eps={:.3e} run={} calls={} gap={:?}", rec.eps, rec.run, rec.oracle_calls, rec.final_gap);
                } else {
                    failed.store(true, Ordering::Relaxed);
                }
                slots.lock().expect("worker panicked")[cell] = Some(out);
            });
        }
    });

    let mut records = Vec::with_capacity(cells);
    for slot in slots.into_inner().expect("worker panicked") {
        match slot {
            Some(Ok(rec)) => records.push(rec),
            Some(Err(e)) => return Err(e),
            // skipped after another cell failed; that error comes first in index order or below
            None => continue,
        }
    }
    Ok(records)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0u64), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Groups consecutive rows sharing an `ε`.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for group in records.chunk_by(|a, b| a.eps == b.eps) {
        let eps = group[0].eps;
        let gaps: Vec<f64> = group.iter().filter_map(|r| r.final_gap).collect();
        let complete = gaps.len() == group.len();
        let stab: Vec<bool> = group.iter().filter_map(|r| r.stabilizing).collect();
        rows.push(SummaryRow {
            eps,
            runs: group.len() as u64,
            mean_oracle_calls: mean(group.iter().map(|r| r.oracle_calls as f64)).unwrap_or(0.0),
            mean_final_gap: if complete { mean(gaps.iter().copied()) } else { None },
            stabilizing_fraction: (stab.len() == group.len()).then(|| stab.iter().filter(|s| **s).count() as f64 / group.len() as f64),
            success_fraction: complete.then(|| gaps.iter().filter(|g| **g <= eps).count() as f64 / group.len() as f64),
        });
    }
    rows
}

/// `runs.csv` → `runs_summary.csv`.
pub fn summary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "runs".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_summary.csv"))
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn records_csv(records: &[RunRecord]) -> Result<String> {
    if records.is_empty() {
        return Ok("eps,run,seed,oracle_calls,final_gap,stabilizing,wall_time_s\n".into());
    }
    to_csv(records)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    to_csv(rows)
}

/// Writes the run table to `out` and the per-`ε` table beside it.
pub fn write_outputs(out: &Path, records: &[RunRecord]) -> Result<PathBuf> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, records_csv(records)?)?;
    let summary = summary_path(out);
    fs::write(&summary, summary_csv(&summarize(records))?)?;
    Ok(summary)
}

/// The CSV with the `wall_time_s` column removed: the part that is a pure
/// function of config and seed.
pub fn data_section(csv_text: &str) -> Result<String> {
    let mut reader = csv::ReaderBuilder::new().from_reader(csv_text.as_bytes());
    let headers = reader.headers()?.clone();
    let keep: Vec<usize> = (0..headers.len()).filter(|i| &headers[*i] != "wall_time_s").collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(keep.iter().map(|i| &headers[*i]))?;
    for rec in reader.records() {
        let rec = rec?;
        w.write_record(keep.iter().map(|i| &rec[*i]))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// `(ε, mean oracle calls, mean gap)` per distinct `ε`, read from either a
/// run table or a summary table.
pub fn read_means(path: &Path) -> Result<Vec<(f64, f64, Option<f64>)>> {
    let text = fs::read_to_string(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let eps_col = col("eps").ok_or_else(|| Error::config("csv", "missing eps column"))?;
    let (calls_col, gap_col, summary) = match (col("mean_oracle_calls"), col("oracle_calls")) {
        (Some(c), _) => (c, col("mean_final_gap"), true),
        (None, Some(c)) => (c, col("final_gap"), false),
        _ => return Err(Error::config("csv", "needs an oracle_calls or mean_oracle_calls column")),
    };
    let num = |s: &str, what: &str| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|_| Error::config(what.to_string(), format!("not a number: {s:?}")))
    };
    // keyed by the bit pattern so equal ε values group exactly
    let mut groups: BTreeMap<u64, (f64, Vec<f64>, Vec<f64>, bool)> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let eps = num(&rec[eps_col], "eps")?;
        let calls = num(&rec[calls_col], "oracle_calls")?;
        let entry = groups.entry(eps.to_bits()).or_insert((eps, Vec::new(), Vec::new(), true));
        entry.1.push(calls);
        match gap_col.map(|c| rec[c].trim()) {
            Some(g) if !g.is_empty() => entry.2.push(num(g, "final_gap")?),
            _ => entry.3 = false,
        }
    }
    let mut out: Vec<(f64, f64, Option<f64>)> = groups
        .into_values()
        .map(|(eps, calls, gaps, complete)| {
            let n = calls.len() as f64;
            let mean_calls = calls.iter().sum::<f64>() / n;
            let gap = (complete && !gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
            (eps, mean_calls, gap)
        })
        .collect();
    if summary {
        log::debug!("read {} summary rows", out.len());
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Least squares `y = slope·x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::dims("fit_line", xs.len(), ys.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::param("xs", "need at least two distinct abscissae"));
    }
    let slope = sxy / sxx;
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        points: xs.len(),
    })
}

/// `log10(mean oracle calls)` against `log10(1/ε)`.
pub fn fit_slope_means(means: &[(f64, f64)]) -> Result<SlopeFit> {
    if means.len() < 3 {
        return Err(Error::config(
            "csv",
            format!("slope fit needs at least 3 distinct eps values, found {}", means.len()),
        ));
    }
    if let Some((e, c)) = means.iter().find(|(e, c)| !(*e > 0.0 && *c > 0.0)) {
        return Err(Error::config(
            "csv",
            format!("eps and mean calls must be positive, found eps={e} calls={c}"),
        ));
    }
    let xs: Vec<f64> = means.iter().map(|(e, _)| (1.0 / e).log10()).collect();
    let ys: Vec<f64> = means.iter().map(|(_, c)| c.log10()).collect();
    fit_line(&xs, &ys)
}

pub fn fit_slope(path: &Path) -> Result<SlopeFit> {
    let means: Vec<(f64, f64)> = read_means(path)?.into_iter().map(|(e, c, _)| (e, c)).collect();
    fit_slope_means(&means)
}

/// `log10(1/ε), log10(mean calls), log10(mean gap)` rows for plotting.
pub fn loglog_csv(path: &Path) -> Result<String> {
    let mut out = String::from("log10_inv_eps,log10_mean_oracle_calls,log10_mean_final_gap\n");
    for (eps, calls, gap) in read_means(path)? {
        let gap = gap.map_or(String::new(), |g| g.log10().to_string());
        out.push_str(&format!("{},{},{}\n", (1.0 / eps).log10(), calls.log10(), gap));
    }
    Ok(out)
}
