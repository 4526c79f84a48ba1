use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use rhpg::experiment::{self, ExperimentConfig, Mode};
use rhpg::lqr::{self, AreOptions};
use rhpg::solver::ScheduleVariant;
use rhpg::verification::Suite;

#[derive(Parser)]
#[command(name = "rhpg", version, about = "Receding-horizon policy gradient for model-free LQR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run RHPG once and print K̃_0.
    Solve {
        #[command(flatten)]
        run: RunArgs,
        /// Index into eps_list.
        #[arg(long, default_value_t = 0)]
        eps_index: usize,
        /// Run index within that ε (selects the seed cell).
        #[arg(long, default_value_t = 0)]
        run_index: u64,
    },
    /// Sweep every (ε, run) cell and write CSV.
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        /// Run table path; the per-ε table goes next to it as <stem>_summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the available processors.
        #[arg(long)]
        jobs: Option<usize>,
        /// Override runs_per_eps.
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Fit log10(mean oracle calls) against log10(1/ε).
    FitSlope {
        /// Run table or summary table.
        csv: PathBuf,
    },
    /// Print log-log columns for plotting.
    Loglog {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run property suites.
    Verify {
        #[arg(long, value_parser = parse_suite, required_unless_present = "all", conflicts_with = "all")]
        suite: Vec<Suite>,
        #[arg(long)]
        all: bool,
        /// Trials, or samples for the statistical suites.
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Solve the ARE and tabulate horizons.
    Riccati {
        #[arg(long)]
        config: Option<PathBuf>,
        /// ε values for the horizon table; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; the built-in scalar instance when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override base_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["experiment", "practical"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["riemannian", "prior"])]
    schedule: Option<String>,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: rhpg::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> rhpg::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::scalar_default()),
    }
}

impl RunArgs {
    fn resolve(&self) -> rhpg::Result<ExperimentConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.base_seed = seed;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = mode.parse::<Mode>()?;
            // an explicit mode switch also switches the default horizon rule
            if !matches!(cfg.horizon, experiment::HorizonRule::Fixed(_)) {
                cfg.horizon = match cfg.mode {
                    Mode::Experiment => experiment::HorizonRule::LogInverseEps,
                    Mode::Practical => experiment::HorizonRule::AccuracyBound,
                };
            }
        }
        if let Some(s) = &self.schedule {
            cfg.variant = s.parse::<ScheduleVariant>()?;
        }
        Ok(cfg)
    }
}

fn init_logging() {
    let level = std::env::var("RHPG_LOG").unwrap_or_else(|_| "error".into());
    let level = match level.as_str() {
        "error" | "info" | "debug" => level,
        other => {
            eprintln!("RHPG_LOG={other:?} not understood, using error");
            "error".into()
        }
    };
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn fmt_matrix(m: &nalgebra::DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| format!("[{}]", r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("[{}]", rows.join(", "))
}

/// Returns whether everything requested succeeded.
fn run(command: Command) -> rhpg::Result<bool> {
    match command {
        Command::Solve { run, eps_index, run_index } => {
            let cfg = run.resolve()?;
            let reference = cfg.reference()?;
            let (rec, result) = cfg.solve(eps_index, run_index, reference.as_ref())?;
            println!("eps            {}", rec.eps);
            println!("horizon        {}", result.gains.len());
            println!("seed           {}", rec.seed);
            println!("oracle_calls   {}", rec.oracle_calls);
            println!("stage_iters    {:?}", result.stage_iterations);
            println!("K0             {}", fmt_matrix(result.k0.matrix()));
            if let Some(sol) = &reference {
                println!("K*             {}", fmt_matrix(sol.k_star.matrix()));
            }
            if let Some(gap) = rec.final_gap {
                println!("final_gap      {gap:.6e}");
            }
            if let Some(s) = rec.stabilizing {
                println!("stabilizing    {s}");
            }
            Ok(true)
        }
        Command::Experiment { run, out, jobs, trials } => {
            let mut cfg = run.resolve()?;
            if let Some(t) = trials {
                if t == 0 {
                    return Err(rhpg::Error::Config {
                        field: "trials".into(),
                        reason: "must be at least 1".into(),
                    });
                }
                cfg.runs_per_eps = t;
            }
            let out = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("results/runs.csv"));
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let start = Instant::now();
            let records = experiment::run_experiment(&cfg, jobs)?;
            let summary_path = experiment::write_outputs(&out, &records)?;
            for row in experiment::summarize(&records) {
                println!(
                    "eps={:.3e} runs={} mean_calls={:.4e} mean_gap={} success={}",
                    row.eps,
                    row.runs,
                    row.mean_oracle_calls,
                    row.mean_final_gap.map_or("-".into(), |g| format!("{g:.4e}")),
                    row.success_fraction.map_or("-".into(), |f| format!("{f:.2}")),
                );
            }
            println!(
                "wrote {} and {} in {:.1}s",
                out.display(),
                summary_path.display(),
                start.elapsed().as_secs_f64()
            );
            Ok(true)
        }
        Command::FitSlope { csv } => {
            let fit = experiment::fit_slope(&csv)?;
            println!("slope {:.6}", fit.slope);
            println!("intercept {:.6}", fit.intercept);
            println!("points {}", fit.points);
            Ok(true)
        }
        Command::Loglog { csv, out } => {
            let text = experiment::loglog_csv(&csv)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(true)
        }
        Command::Verify { suite, all, trials, seed } => {
            let suites: Vec<Suite> = if all { Suite::ALL.to_vec() } else { suite };
            let mut ok = true;
            for s in suites {
                let start = Instant::now();
                let report = s.run(seed, trials)?;
                ok &= report.passed();
                println!("{report} time={:.2}s", start.elapsed().as_secs_f64());
            }
            Ok(ok)
        }
        Command::Riccati { config, eps } => {
            let cfg = load_config(config.as_deref())?;
            let start = Instant::now();
            let sol = lqr::solve_are(&cfg.model, &cfg.cost, AreOptions::default())?;
            let stab = lqr::check_stabilizing(&cfg.model, &sol.k_star, &sol.p_star)?;
            println!("P* = {}", fmt_matrix(sol.p_star.matrix()));
            println!("K* = {}", fmt_matrix(sol.k_star.matrix()));
            println!("spectral_radius(A - BK*) = {:.6}", stab.spectral_radius);
            println!("iterations = {} residual = {:.3e}", sol.iterations, sol.residual);
            let eps = if eps.is_empty() { cfg.eps_list.clone() } else { eps };
            let dominant = cfg.cost.terminal_dominates(&sol.p_star)?;
            println!("{:>12} {:>10} {:>10}", "eps", "N_log", "N_bound");
            for e in eps {
                let log_rule = lqr::horizon_log_rule(e)?;
                let bound = if dominant {
                    lqr::horizon_for_accuracy(&sol, &cfg.model, &cfg.cost, e)?.to_string()
                } else {
                    "-".into()
                };
                println!("{e:>12.4e} {log_rule:>10} {bound:>10}");
            }
            log::info!("riccati finished in {:.3}s", start.elapsed().as_secs_f64());
            Ok(true)
        }
    }
}
