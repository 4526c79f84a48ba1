//! wasm-bindgen surface for the static demo in `www/`.
//!
//! Every entry point takes the same TOML config text the CLI reads, so a
//! config can be pasted between the two. The `*_impl` functions hold the
//! logic and are what the native tests call.

use wasm_bindgen::prelude::*;

use rhpg::experiment::ExperimentConfig;
use rhpg::lqr::{self, AreOptions};
use rhpg::matrix;
use rhpg::seeding;
use rhpg::solver::{self, GradientSource};

#[wasm_bindgen]
pub struct AreView {
    p_star: Vec<f64>,
    k_star: Vec<f64>,
    n: usize,
    m: usize,
    spectral_radius: f64,
    iterations: usize,
}

#[wasm_bindgen]
impl AreView {
    /// Row-major `n×n`.
    #[wasm_bindgen(getter)]
    pub fn p_star(&self) -> Vec<f64> {
        self.p_star.clone()
    }

    /// Row-major `m×n`.
    #[wasm_bindgen(getter)]
    pub fn k_star(&self) -> Vec<f64> {
        self.k_star.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.n
    }

    #[wasm_bindgen(getter)]
    pub fn m(&self) -> usize {
        self.m
    }

    #[wasm_bindgen(getter)]
    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

#[wasm_bindgen]
pub struct TraceView {
    k0: Vec<f64>,
    final_gap: f64,
    stabilizing: bool,
    oracle_calls: f64,
    horizon: usize,
    stages: Vec<f64>,
    iterations: Vec<f64>,
    gaps: Vec<f64>,
}

#[wasm_bindgen]
impl TraceView {
    #[wasm_bindgen(getter)]
    pub fn k0(&self) -> Vec<f64> {
        self.k0.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn final_gap(&self) -> f64 {
        self.final_gap
    }

    #[wasm_bindgen(getter)]
    pub fn stabilizing(&self) -> bool {
        self.stabilizing
    }

    #[wasm_bindgen(getter)]
    pub fn oracle_calls(&self) -> f64 {
        self.oracle_calls
    }

    #[wasm_bindgen(getter)]
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Stage index of each sample.
    #[wasm_bindgen(getter)]
    pub fn stages(&self) -> Vec<f64> {
        self.stages.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> Vec<f64> {
        self.iterations.clone()
    }

    /// `‖K_{h,t} − K̃*_h‖_F` at each sample.
    #[wasm_bindgen(getter)]
    pub fn gaps(&self) -> Vec<f64> {
        self.gaps.clone()
    }
}

fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn parse(config: &str) -> Result<ExperimentConfig, String> {
    ExperimentConfig::from_toml_str(config).map_err(|e| e.to_string())
}

pub fn solve_are_impl(config: &str) -> Result<AreView, String> {
    let cfg = parse(config)?;
    let sol = lqr::solve_are(&cfg.model, &cfg.cost, AreOptions::default()).map_err(|e| e.to_string())?;
    let acl = lqr::closed_loop(&cfg.model, &sol.k_star).map_err(|e| e.to_string())?;
    Ok(AreView {
        p_star: row_major(sol.p_star.matrix()),
        k_star: row_major(sol.k_star.matrix()),
        n: cfg.model.state_dim(),
        m: cfg.model.input_dim(),
        spectral_radius: matrix::spectral_radius(&acl).map_err(|e| e.to_string())?,
        iterations: sol.iterations,
    })
}

/// `‖P*_t − P*‖` for `t = 0..=horizon`.
pub fn rde_decay_impl(config: &str, horizon: usize) -> Result<Vec<f64>, String> {
    let cfg = parse(config)?;
    let sol = lqr::solve_are(&cfg.model, &cfg.cost, AreOptions::default()).map_err(|e| e.to_string())?;
    let rde = lqr::solve_rde(&cfg.model, &cfg.cost, horizon).map_err(|e| e.to_string())?;
    Ok((0..=horizon)
        .map(|t| matrix::spectral_norm(&(rde.value(t).matrix() - sol.p_star.matrix())))
        .collect())
}

/// One RHPG run at `eps`, sampling the stage gap every `log_every` iterations.
pub fn rhpg_trace_impl(config: &str, eps: f64, seed: u64, log_every: u64) -> Result<TraceView, String> {
    let cfg = parse(config)?;
    let reference = cfg.reference().map_err(|e| e.to_string())?.ok_or("no ARE solution for this instance")?;
    let mut run_cfg = cfg.rhpg_config(eps, Some(&reference)).map_err(|e| e.to_string())?;
    run_cfg.gradient = GradientSource::OnePoint;
    run_cfg.log_every = Some(log_every.max(1));
    let mut rng = seeding::rng_for(seed, 0, 0);
    let result = solver::run_rhpg(cfg.problem(), &run_cfg, Some(&reference), &mut rng).map_err(|e| e.to_string())?;
    let (mut stages, mut iterations, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
    for diag in &result.diagnostics {
        for s in &diag.samples {
            stages.push(diag.stage as f64);
            iterations.push(s.iteration as f64);
            gaps.push(s.gap);
        }
    }
    Ok(TraceView {
        k0: row_major(result.k0.matrix()),
        final_gap: result.final_gap.unwrap_or(f64::NAN),
        stabilizing: result.stabilizing.unwrap_or(false),
        oracle_calls: result.total_oracle_calls as f64,
        horizon: run_cfg.horizon,
        stages,
        iterations,
        gaps,
    })
}

#[wasm_bindgen]
pub fn solve_are(config: &str) -> Result<AreView, JsError> {
    solve_are_impl(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rde_decay(config: &str, horizon: usize) -> Result<Vec<f64>, JsError> {
    rde_decay_impl(config, horizon).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rhpg_trace(config: &str, eps: f64, seed: u64, log_every: u64) -> Result<TraceView, JsError> {
    rhpg_trace_impl(config, eps, seed, log_every).map_err(|e| JsError::new(&e))
}

/// The built-in scalar instance, for prefilling the page.
#[wasm_bindgen]
pub fn default_config() -> String {
    format!(
        "{}\n[run]\nk_init = \"zero\"\n\n[tuned]\ntheta = 5000.0\niteration_scale = 400.0\n",
        rhpg::experiment::SCALAR_INSTANCE
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_are() {
        let view = solve_are_impl(&default_config()).unwrap();
        assert!((view.p_star[0] - 221.4271).abs() < 1e-3);
        assert!((view.k_star[0] - 14.5482).abs() < 1e-3);
        assert!(view.spectral_radius < 1.0);
    }

    #[test]
    fn decay_curve_shrinks() {
        let curve = rde_decay_impl(&default_config(), 6).unwrap();
        assert_eq!(curve.len(), 7);
        assert!((curve[6] - 78.573).abs() < 1e-2);
        assert!(curve[0] < 1e-6);
    }

    #[test]
    fn trace_reaches_tolerance() {
        let t = rhpg_trace_impl(&default_config(), 0.3, 3, 500).unwrap();
        assert_eq!(t.horizon, 1);
        assert!(t.final_gap <= 0.3, "{}", t.final_gap);
        assert!(!t.gaps.is_empty());
        assert_eq!(t.stages.len(), t.gaps.len());
    }

    #[test]
    fn bad_config_is_reported() {
        assert!(solve_are_impl("not toml").is_err());
    }
}
