//! Acceptance run: one line per criterion, non-zero exit if any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rhpg::experiment::{self, ExperimentConfig};
use rhpg::lqr::{self, AreOptions};
use rhpg::verification::{self, Suite, SuiteReport};

const SEED: u64 = 20240601;

type Check = Box<dyn Fn() -> Outcome>;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn canonical_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scalar.toml");
    ExperimentConfig::load(&path).expect("canonical config loads")
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rhpg"))
}

fn parse_scalar(stdout: &str, prefix: &str) -> Option<f64> {
    let line = stdout.lines().find(|l| l.starts_with(prefix))?;
    line[prefix.len()..].trim().trim_matches(|c| c == '[' || c == ']').parse().ok()
}

fn are_reproduction() -> Outcome {
    let start = Instant::now();
    let out = bin().arg("riccati").output().expect("binary runs");
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let (Some(p), Some(k)) = (parse_scalar(&stdout, "P* = "), parse_scalar(&stdout, "K* = ")) else {
        return Outcome::new(false, format!("could not parse output: {stdout}"));
    };
    let ok = out.status.success() && (p - 221.4271).abs() <= 1e-3 && (k - 14.5482).abs() <= 1e-3 && elapsed < Duration::from_secs(1);
    Outcome::new(ok, format!("P*={p:.6} K*={k:.6} time={:.3}s", elapsed.as_secs_f64()))
}

fn no_initial_stability() -> Outcome {
    let mut cfg = canonical_config();
    let eps = 10f64.powf(-0.5);
    cfg.eps_list = vec![eps];
    cfg.runs_per_eps = 100;
    let start = Instant::now();
    let recs = match experiment::run_experiment(&cfg, jobs()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("error: {e}")),
    };
    let gaps: Vec<f64> = recs.iter().map(|r| r.final_gap.unwrap_or(f64::INFINITY)).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let within = gaps.iter().filter(|g| **g <= eps).count();
    let unstable_successes = recs
        .iter()
        .filter(|r| r.final_gap.is_some_and(|g| g <= eps) && r.stabilizing != Some(true))
        .count();
    let ok = recs.len() == 100 && mean <= eps && within >= 90 && unstable_successes == 0;
    Outcome::new(
        ok,
        format!(
            "mean_gap={mean:.4} (eps={eps:.4}) within={within}/100 unstable_successes={unstable_successes} time={:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn slope_sanity() -> Outcome {
    let mut cfg = canonical_config();
    cfg.eps_list = vec![10f64.powf(-0.5), 1e-1, 10f64.powf(-1.5), 1e-2];
    cfg.runs_per_eps = 5;
    let start = Instant::now();
    let recs = match experiment::run_experiment(&cfg, jobs()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("error: {e}")),
    };
    let means: Vec<(f64, f64)> = experiment::summarize(&recs).iter().map(|r| (r.eps, r.mean_oracle_calls)).collect();
    match experiment::fit_slope_means(&means) {
        Ok(fit) => Outcome::new(
            fit.slope <= 2.2,
            format!(
                "slope={:.3} (ceiling 2.2) runs/eps=5 time={:.1}s",
                fit.slope,
                start.elapsed().as_secs_f64()
            ),
        ),
        Err(e) => Outcome::new(false, format!("error: {e}")),
    }
}

fn suite(s: Suite, limit: Duration) -> Outcome {
    let start = Instant::now();
    match s.run(SEED, None) {
        Ok(rep) => suite_outcome(&rep, start.elapsed(), limit),
        Err(e) => Outcome::new(false, format!("error: {e}")),
    }
}

fn suite_outcome(rep: &SuiteReport, elapsed: Duration, limit: Duration) -> Outcome {
    let ok = rep.passed() && rep.skipped.is_none() && elapsed < limit;
    let mut detail = format!(
        "trials={} failures={} worst_margin={:.3e} time={:.2}s (limit {}s)",
        rep.trials,
        rep.failures,
        rep.worst_margin,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    if !rep.detail.is_empty() {
        detail.push_str(&format!(" [{}]", rep.detail));
    }
    if let Some(why) = &rep.skipped {
        detail.push_str(&format!(" skipped: {why}"));
    }
    Outcome::new(ok, detail)
}

fn unbiasedness() -> Outcome {
    let start = Instant::now();
    let case = verification::EstimatorCase::scalar_default();
    let exact = case.exact_gradient().expect("gradient")[(0, 0)];
    if (exact + 990.0).abs() > 1e-9 {
        return Outcome::new(false, format!("exact gradient {exact}, expected -990"));
    }
    match Suite::Unbiasedness.run(SEED, Some(1_000_000)) {
        Ok(rep) => suite_outcome(&rep, start.elapsed(), Duration::from_secs(30)),
        Err(e) => Outcome::new(false, format!("error: {e}")),
    }
}

fn rde_decay() -> Outcome {
    let cfg = canonical_config();
    let sol = lqr::solve_are(&cfg.model, &cfg.cost, AreOptions::default()).expect("ARE");
    let rde = lqr::solve_rde(&cfg.model, &cfg.cost, 1).expect("RDE");
    let lhs = rde.value(0).matrix()[(0, 0)] - sol.p_star.matrix()[(0, 0)];
    let rate = 5.0 - 0.33 * sol.k_star.matrix()[(0, 0)];
    let rhs = rate * rate * (300.0 - sol.p_star.matrix()[(0, 0)]);
    let mut out = suite(Suite::RdeDecay, Duration::from_secs(10));
    out.passed &= lhs <= rhs;
    out.detail = format!("scalar one step {lhs:.3} <= {rhs:.3}; {}", out.detail);
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("small.toml");
    let text = format!(
        "{}\n[run]\neps_list = [0.5, 0.3]\nruns_per_eps = 4\nbase_seed = 99\n\n[tuned]\niteration_scale = 50.0\n",
        experiment::SCALAR_INSTANCE
    );
    std::fs::write(&config, text).expect("write config");
    let run = |name: &str| -> Result<PathBuf, String> {
        let out = dir.path().join(name);
        let output = bin()
            .args(["experiment", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if output.status.success() {
            Ok(out)
        } else {
            Err(format!(
                "experiment exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            ))
        }
    };
    let (a, b) = match (run("a.csv"), run("b.csv")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, e),
    };
    let section = |p: &Path| experiment::data_section(&std::fs::read_to_string(p).expect("csv written")).expect("csv parses");
    let (da, db) = (section(&a), section(&b));
    let summary = |p: &Path| std::fs::read(experiment::summary_path(p)).expect("summary written");
    let ok = da == db && summary(&a) == summary(&b) && da.lines().count() == 9;
    Outcome::new(ok, format!("{} data rows, data sections identical: {}", da.lines().count() - 1, da == db))
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Check)> = vec![
        ("1 ARE reproduction", Box::new(are_reproduction)),
        ("2 no initial stability", Box::new(no_initial_stability)),
        ("3 slope sanity", Box::new(slope_sanity)),
        ("4 contraction suite", Box::new(|| suite(Suite::Contraction, Duration::from_secs(10)))),
        ("5 delta bounds suite", Box::new(|| suite(Suite::DeltaBounds, Duration::from_secs(10)))),
        ("6 unbiasedness suite", Box::new(unbiasedness)),
        ("7 second moment suite", Box::new(|| suite(Suite::SecondMoment, Duration::from_secs(10)))),
        (
            "8 convexity/smoothness suite",
            Box::new(|| suite(Suite::SmoothnessConvexity, Duration::from_secs(10))),
        ),
        ("9 RDE decay suite", Box::new(rde_decay)),
        (
            "10 outer-loop propagation suite",
            Box::new(|| suite(Suite::OuterLoopPropagation, Duration::from_secs(60))),
        ),
        (
            "11 completion-of-squares suite",
            Box::new(|| suite(Suite::CompletionOfSquares, Duration::from_secs(5))),
        ),
        ("12 determinism", Box::new(determinism)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let out = check();
        if !out.passed {
            failed += 1;
        }
        println!("[{}] {name}: {}", if out.passed { "PASS" } else { "FAIL" }, out.detail);
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
