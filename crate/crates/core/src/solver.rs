//! Receding-horizon policy gradient: a backward loop over stages, each
//! solved by zeroth-order SGD on its one-step surrogate cost.
//!
//! Two schedules drive the inner loop. [`Schedule::Theory`] derives every
//! step-size constant and iteration count from the model exactly as the
//! convergence guarantees prescribe; for realistic instances those counts run
//! to 1e20 and beyond, so a call budget guards against launching them.
//! [`Schedule::Practical`] keeps the same step-size law and tolerance
//! structure but takes the offset `θ` and an iteration scale from the user.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lqr::{self, CostSpec, PolicyGain, RiccatiSolution, Stage, SystemModel, ValueSequence};
use crate::matrix::{self, PdMatrix};
use crate::rollout::{ExplorationConfig, InitialStateModel, OnePointEstimator, StageOracle};

/// Model constants shared by the tolerance and step-size schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsBundle {
    /// `σ_min(Q)/2`
    pub a: f64,
    /// `max_t ‖A − BK*_t‖` over the exact finite-horizon gains.
    pub phi: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

pub fn compute_constants(model: &SystemModel, cost: &CostSpec, rde: &ValueSequence) -> Result<ConstantsBundle> {
    cost.check(model)?;
    let a = matrix::min_singular_value(cost.q().matrix()) / 2.0;
    let mut phi = 0.0f64;
    for k in rde.gains() {
        phi = phi.max(matrix::spectral_norm(&lqr::closed_loop(model, k)?));
    }
    let norm_a = matrix::spectral_norm(model.a());
    let norm_b = matrix::spectral_norm(model.b());
    let lambda_r = cost.r().min_eigenvalue();
    let shifted = cost.q_terminal().shifted(a)?;
    let c1 = phi * norm_b / lambda_r;
    let c2 = 2.0 * phi * norm_a * (1.0 + shifted.norm() * norm_b * norm_b / lambda_r);
    let b = model.b();
    let c3 = 2.0 * matrix::spectral_norm(&(cost.r().matrix() + b.transpose() * shifted.matrix() * b));
    Ok(ConstantsBundle { a, phi, c1, c2, c3 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleVariant {
    /// Linear error accumulation, requires invertible `A`.
    #[default]
    Riemannian,
    /// Exponential accumulation through powers of `C2`.
    Prior,
}

impl std::str::FromStr for ScheduleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "riemannian" => Ok(Self::Riemannian),
            "prior" => Ok(Self::Prior),
            other => Err(Error::param("schedule", format!("expected riemannian or prior, got {other:?}"))),
        }
    }
}

/// Per-stage accuracy targets `ς_{h,ε}`, indexed by `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToleranceSchedule {
    pub variant: ScheduleVariant,
    pub eps: f64,
    pub values: Vec<f64>,
}

fn check_eps_horizon(eps: f64, horizon: usize) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    if horizon == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    Ok(())
}

/// Full tolerance schedule, every term of the guarantee included.
pub fn tolerance_schedule(eps: f64, horizon: usize, k: &ConstantsBundle, cost: &CostSpec, variant: ScheduleVariant) -> Result<ToleranceSchedule> {
    check_eps_horizon(eps, horizon)?;
    let e = std::f64::consts::E;
    let n = horizon as f64;
    let qn = cost.q_terminal().norm();
    let values = (0..horizon)
        .map(|h| {
            if h == 0 {
                return eps / 4.0;
            }
            match variant {
                ScheduleVariant::Riemannian => [
                    (k.a / (k.c3 * n)).sqrt(),
                    (k.a * k.a / (2.0 * e * n * qn * k.c3)).sqrt(),
                    (k.a * eps / (8.0 * e * n * k.c1 * qn * k.c3)).sqrt(),
                    (eps / (4.0 * k.c1 * k.c3)).sqrt(),
                ]
                .into_iter()
                .fold(f64::INFINITY, f64::min),
                ScheduleVariant::Prior => {
                    let base = (k.a / k.c3).sqrt();
                    if h == 1 {
                        base.min(0.5 * (eps / (k.c1 * k.c3)).sqrt())
                    } else {
                        let p = k.c2.powi(h as i32 - 2);
                        base.min((k.a / (p * k.c3)).sqrt()).min(0.5 * (eps / (k.c1 * p * k.c3)).sqrt())
                    }
                }
            }
        })
        .collect();
    Ok(ToleranceSchedule { variant, eps, values })
}

/// Only the `ε`-dependent term of each stage's tolerance. These are what set
/// the `ε`-scaling of the iteration counts; the dropped terms are constants
/// that only matter for the worst-case guarantee.
pub fn accuracy_tolerances(eps: f64, horizon: usize, k: &ConstantsBundle, variant: ScheduleVariant) -> Result<ToleranceSchedule> {
    check_eps_horizon(eps, horizon)?;
    let values = (0..horizon)
        .map(|h| match (h, variant) {
            (0, _) => eps / 4.0,
            (_, ScheduleVariant::Riemannian) => (eps / (4.0 * k.c1 * k.c3)).sqrt(),
            (1, ScheduleVariant::Prior) => 0.5 * (eps / (k.c1 * k.c3)).sqrt(),
            (_, ScheduleVariant::Prior) => 0.5 * (eps / (k.c1 * k.c2.powi(h as i32 - 2) * k.c3)).sqrt(),
        })
        .collect();
    Ok(ToleranceSchedule { variant, eps, values })
}

/// Which `ξ₁` to use. The displayed second-moment bound squares `C̃_h` in
/// the `‖R‖` term; the line it is derived from does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Xi1Form {
    #[default]
    Squared,
    Linear,
}

impl std::str::FromStr for Xi1Form {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "linear" => Ok(Self::Linear),
            other => Err(Error::param("xi1_form", format!("expected squared or linear, got {other:?}"))),
        }
    }
}

/// Step-size and iteration plan for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoopPlan {
    pub mu: f64,
    pub l: f64,
    pub c_tilde: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
    pub theta: f64,
    /// Real-valued iteration count before rounding up.
    pub t_real: f64,
    /// `⌈t_real⌉`, saturating at `u64::MAX`.
    pub iterations: u64,
    pub zeta: f64,
    pub varsigma: f64,
}

impl InnerLoopPlan {
    /// `α_t = (2/μ)/(t + θ)`.
    pub fn step_size(&self, t: u64) -> f64 {
        step_size(self.mu, self.theta, t)
    }
}

pub(crate) fn step_size(mu: f64, theta: f64, t: u64) -> f64 {
    2.0 / (mu * (t as f64 + theta))
}

/// Strong-convexity parameter `μ = 4σ_min(Σ0)σ_min(R)`.
pub fn strong_convexity(sigma0: &PdMatrix, cost: &CostSpec) -> f64 {
    4.0 * sigma0.min_eigenvalue() * cost.r().min_eigenvalue()
}

/// Smoothness constant `L = C3‖Σ0‖`.
pub fn smoothness(bundle: &ConstantsBundle, sigma0: &PdMatrix) -> f64 {
    bundle.c3 * sigma0.norm()
}

pub(crate) fn ceil_count(x: f64) -> u64 {
    if x.is_nan() || x >= u64::MAX as f64 {
        u64::MAX
    } else {
        x.ceil().max(0.0) as u64
    }
}

/// Second-moment constants of the estimator and the plan they imply.
///
/// `j0` is the surrogate cost at the starting gain; `j_star` its minimum,
/// or `None` to lower-bound it by 0.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop_plan(
    j0: f64,
    j_star: Option<f64>,
    bundle: &ConstantsBundle,
    sigma0: &PdMatrix,
    cost: &CostSpec,
    model: &SystemModel,
    sigma: f64,
    c_m: f64,
    zeta: f64,
    varsigma: f64,
    form: Xi1Form,
) -> Result<InnerLoopPlan> {
    if !(j0 > 0.0 && j0.is_finite()) {
        return Err(Error::param("J0", format!("initial surrogate cost must be positive, got {j0}")));
    }
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::param("zeta", format!("must lie in (0, 1), got {zeta}")));
    }
    if !(varsigma > 0.0) {
        return Err(Error::param("varsigma", "must be positive"));
    }
    if !(sigma > 0.0) {
        return Err(Error::param("sigma", "must be positive"));
    }
    let mu = strong_convexity(sigma0, cost);
    let l = smoothness(bundle, sigma0);
    let c_tilde = (10.0 * j0 / zeta + j_star.unwrap_or(0.0)) / (sigma0.min_eigenvalue() * cost.r().min_eigenvalue());
    let (qn, r, q) = (cost.q_terminal().norm(), cost.r().norm(), cost.q().norm());
    let norm_a = matrix::spectral_norm(model.a());
    let norm_b = matrix::spectral_norm(model.b());
    let r_term = match form {
        Xi1Form::Squared => c_tilde * c_tilde,
        Xi1Form::Linear => c_tilde,
    };
    let xi1 = (q + 2.0 * r * r_term + 2.0 * (qn + bundle.a) * (norm_a * norm_a + 2.0 * norm_b * norm_b * c_tilde)) * c_m.powf(1.5);
    let xi2 = 2.0 * (r + 2.0 * (qn + bundle.a) * norm_b * norm_b) * c_m.sqrt();
    let m = model.input_dim() as f64;
    let xi3 = xi1 * xi1 * m / (sigma * sigma) + 2.0 * xi1 * xi2 * m * (m + 2.0) + sigma * sigma * xi2 * xi2 * m * (m + 2.0) * (m + 4.0);
    let theta = f64::max(2.0, 2.0 * l * xi3 / (mu * mu * j0));
    let t_real = 40.0 / (7.0 * mu * varsigma * varsigma * zeta) * theta * j0;
    Ok(InnerLoopPlan {
        mu,
        l,
        c_tilde,
        xi1,
        xi2,
        xi3,
        theta,
        t_real,
        iterations: ceil_count(t_real).max(1),
        zeta,
        varsigma,
    })
}

/// Where inner-loop gradients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientSource {
    #[default]
    OnePoint,
    /// Exact surrogate gradient from the model. Testing hook only.
    Exact,
}

/// Optimality gap `Δ_t` and distance to the stage minimizer at iteration `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterateSample {
    pub iteration: u64,
    pub delta: f64,
    pub gap: f64,
    pub oracle_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterateDiagnostics {
    pub stage: usize,
    pub oracle_calls: u64,
    /// Empty unless logging was requested.
    pub samples: Vec<IterateSample>,
    /// `‖K_{h,T} − K̃*_h‖_F` at exit, when the model was available.
    pub final_gap: Option<f64>,
}

/// Step-size law and iteration count for one stage's inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    pub mu: f64,
    pub theta: f64,
    pub iterations: u64,
}

impl From<&InnerLoopPlan> for StepRule {
    fn from(p: &InnerLoopPlan) -> Self {
        Self {
            mu: p.mu,
            theta: p.theta,
            iterations: p.iterations,
        }
    }
}

/// Model handle for exact gradients and iterate logging. The estimator path
/// never reads it.
#[derive(Debug, Clone, Copy)]
pub struct Inspector<'a> {
    pub p_next: &'a PdMatrix,
    pub log_every: Option<u64>,
}

/// Runs `rule.iterations` SGD steps from `k_init` on the stage behind
/// `estimator`, one oracle call per step.
pub fn run_inner_loop<R: Rng + ?Sized>(
    stage: usize,
    k_init: &PolicyGain,
    rule: StepRule,
    estimator: &mut OnePointEstimator<'_>,
    source: GradientSource,
    inspector: Option<Inspector<'_>>,
    rng: &mut R,
) -> Result<(PolicyGain, IterateDiagnostics)> {
    let oracle = estimator.oracle();
    let (model, cost) = (oracle.model(), oracle.cost());
    let sigma0 = estimator.initial_state().sigma0().clone();
    let mut k = k_init.matrix().clone();
    let exact = |k: &DMatrix<f64>, p_next: &PdMatrix| -> Result<DMatrix<f64>> {
        let g = PolicyGain::new(k.clone(), Stage::Index(stage))?;
        lqr::exact_surrogate_gradient(&g, p_next, &sigma0, model, cost)
    };
    let (target, j_star) = match inspector {
        Some(ins) => {
            let ks = lqr::gain_from_value(ins.p_next, model, cost)?;
            let js = lqr::exact_surrogate_cost(&ks, ins.p_next, &sigma0, model, cost)?;
            (Some(ks.into_matrix()), js)
        }
        None => (None, 0.0),
    };
    let log = |k: &DMatrix<f64>, t: u64, calls: u64, out: &mut Vec<IterateSample>| -> Result<()> {
        if let (Some(ins), Some(target)) = (inspector, target.as_ref()) {
            let g = PolicyGain::new(k.clone(), Stage::Index(stage))?;
            let j = lqr::exact_surrogate_cost(&g, ins.p_next, &sigma0, model, cost)?;
            out.push(IterateSample {
                iteration: t,
                delta: j - j_star,
                gap: (k - target).norm(),
                oracle_calls: calls,
            });
        }
        Ok(())
    };
    let log_every = inspector.and_then(|i| i.log_every).filter(|&e| e > 0);
    let mut samples = Vec::new();
    let mut calls = 0u64;
    if log_every.is_some() {
        log(&k, 0, 0, &mut samples)?;
    }
    let p_exact = match (source, inspector) {
        (GradientSource::Exact, Some(ins)) => Some(ins.p_next),
        (GradientSource::Exact, None) => return Err(Error::param("gradient", "exact gradients need the model inspector")),
        _ => None,
    };
    for t in 0..rule.iterations {
        let alpha = step_size(rule.mu, rule.theta, t);
        match p_exact {
            None => {
                estimator.descend(&mut k, alpha, rng);
            }
            Some(p) => {
                let g = exact(&k, p)?;
                k -= g * alpha;
            }
        }
        calls += 1;
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage, iteration: t + 1 });
        }
        if let Some(every) = log_every {
            if (t + 1) % every == 0 || t + 1 == rule.iterations {
                log(&k, t + 1, calls, &mut samples)?;
            }
        }
    }
    let final_gap = target.as_ref().map(|target| (&k - target).norm());
    Ok((
        PolicyGain::new(k, Stage::Index(stage))?,
        IterateDiagnostics {
            stage,
            oracle_calls: calls,
            samples,
            final_gap,
        },
    ))
}

/// Starting gain for each stage's inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KInitRule {
    /// Output of the stage solved just before (`h + 1`); zero at `h = N−1`.
    #[default]
    Previous,
    Zero,
}

impl std::str::FromStr for KInitRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "previous" => Ok(Self::Previous),
            "zero" => Ok(Self::Zero),
            other => Err(Error::param("k_init", format!("expected previous or zero, got {other:?}"))),
        }
    }
}

/// How many inner iterations a practical schedule runs at each stage.
#[derive(Debug, Clone, PartialEq)]
pub enum IterationRule {
    /// `⌈scale / ς̂_h²⌉`, with `ς̂_h` from [`accuracy_tolerances`].
    Scaled(f64),
    /// Explicit counts indexed by stage `h`.
    PerStage(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Theory {
        xi1_form: Xi1Form,
        /// Refuse to start a stage whose plan would push the total beyond this.
        max_oracle_calls: u64,
        /// Use the exact stage optimum in `C̃_h`; otherwise bound it below by 0.
        exact_optimum: bool,
    },
    Practical {
        /// Defaults to the strong-convexity constant.
        mu: Option<f64>,
        theta: f64,
        iterations: IterationRule,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhpgConfig {
    pub horizon: usize,
    pub eps: f64,
    pub sigma: f64,
    /// Overall failure budget, split evenly across stages.
    pub delta_total: f64,
    pub k_init: KInitRule,
    pub variant: ScheduleVariant,
    pub schedule: Schedule,
    pub gradient: GradientSource,
    /// Log `Δ_t` and the gap every this many iterations.
    pub log_every: Option<u64>,
}

impl RhpgConfig {
    pub fn zeta(&self) -> f64 {
        self.delta_total / self.horizon as f64
    }

    fn validate(&self) -> Result<()> {
        check_eps_horizon(self.eps, self.horizon)?;
        ExplorationConfig::new(self.sigma)?;
        if !(self.delta_total > 0.0 && self.delta_total < 1.0) {
            return Err(Error::param("delta_total", format!("must lie in (0, 1), got {}", self.delta_total)));
        }
        match &self.schedule {
            Schedule::Practical { mu, theta, iterations } => {
                if let Some(mu) = mu {
                    if !(*mu > 0.0) {
                        return Err(Error::param("mu", "must be positive"));
                    }
                }
                if !(*theta > 0.0) {
                    return Err(Error::param("theta", "must be positive"));
                }
                match iterations {
                    IterationRule::Scaled(c) if !(*c > 0.0) => return Err(Error::param("iteration_scale", "must be positive")),
                    IterationRule::PerStage(v) if v.len() != self.horizon => {
                        return Err(Error::dims("stage_iterations", self.horizon, v.len()));
                    }
                    _ => {}
                }
            }
            Schedule::Theory { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhpgResult {
    /// `K̃_0`.
    pub k0: PolicyGain,
    /// `K̃_h` indexed by `h`.
    pub gains: Vec<PolicyGain>,
    pub stage_iterations: Vec<u64>,
    pub tolerances: ToleranceSchedule,
    /// Per-stage plans; only filled by the theory schedule.
    pub plans: Vec<Option<InnerLoopPlan>>,
    pub diagnostics: Vec<IterateDiagnostics>,
    pub total_oracle_calls: u64,
    /// `‖K̃_0 − K*‖`, when a reference solution was supplied.
    pub final_gap: Option<f64>,
    pub stabilizing: Option<bool>,
}

/// Everything a run needs to know about the instance.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a SystemModel,
    pub cost: &'a CostSpec,
    pub init: &'a InitialStateModel,
}

/// Backward outer loop `h = N−1, …, 0`.
///
/// The model is read for schedule constants and for reporting against
/// `reference`; gradients come only from the cost oracle unless
/// [`GradientSource::Exact`] is selected.
pub fn run_rhpg<R: Rng + ?Sized>(problem: Problem<'_>, cfg: &RhpgConfig, reference: Option<&RiccatiSolution>, rng: &mut R) -> Result<RhpgResult> {
    cfg.validate()?;
    let Problem { model, cost, init } = problem;
    cost.check(model)?;
    let n_stages = cfg.horizon;
    let (m, n) = (model.input_dim(), model.state_dim());
    let rde = lqr::solve_rde(model, cost, n_stages)?;
    let bundle = compute_constants(model, cost, &rde)?;
    let zeta = cfg.zeta();
    let expl = ExplorationConfig::new(cfg.sigma)?;
    let sigma0 = init.sigma0();
    let tolerances = match cfg.schedule {
        Schedule::Theory { .. } => tolerance_schedule(cfg.eps, n_stages, &bundle, cost, cfg.variant)?,
        Schedule::Practical { .. } => accuracy_tolerances(cfg.eps, n_stages, &bundle, cfg.variant)?,
    };
    let needs_model = matches!(cfg.schedule, Schedule::Theory { .. }) || cfg.gradient == GradientSource::Exact || cfg.log_every.is_some();

    let mut gains: Vec<PolicyGain> = (0..n_stages).map(|h| PolicyGain::zeros(m, n, Stage::Index(h))).collect();
    let mut stage_iterations = vec![0u64; n_stages];
    let mut plans = vec![None; n_stages];
    let mut diagnostics = Vec::with_capacity(n_stages);
    let mut total = 0u64;
    let mut p_next = cost.q_terminal().clone();

    for h in (0..n_stages).rev() {
        let k_init = match cfg.k_init {
            KInitRule::Previous if h + 1 < n_stages => gains[h + 1].clone().at_stage(Stage::Index(h)),
            _ => PolicyGain::zeros(m, n, Stage::Index(h)),
        };
        let rule = match &cfg.schedule {
            Schedule::Theory {
                xi1_form,
                max_oracle_calls,
                exact_optimum,
            } => {
                let j0 = lqr::exact_surrogate_cost(&k_init, &p_next, sigma0, model, cost)?;
                let j_star = if *exact_optimum {
                    let k_star = lqr::gain_from_value(&p_next, model, cost)?;
                    Some(lqr::exact_surrogate_cost(&k_star, &p_next, sigma0, model, cost)?)
                } else {
                    None
                };
                let plan = inner_loop_plan(
                    j0,
                    j_star,
                    &bundle,
                    sigma0,
                    cost,
                    model,
                    cfg.sigma,
                    init.c_m(),
                    zeta,
                    tolerances.values[h],
                    *xi1_form,
                )?;
                if total as f64 + plan.t_real > *max_oracle_calls as f64 {
                    return Err(Error::BudgetExceeded {
                        stage: h,
                        planned: plan.t_real,
                        budget: *max_oracle_calls,
                    });
                }
                plans[h] = Some(plan);
                StepRule::from(&plan)
            }
            Schedule::Practical { mu, theta, iterations } => {
                let iterations = match iterations {
                    IterationRule::Scaled(c) => ceil_count(c / tolerances.values[h].powi(2)).max(1),
                    IterationRule::PerStage(v) => v[h],
                };
                StepRule {
                    mu: mu.unwrap_or_else(|| strong_convexity(sigma0, cost)),
                    theta: *theta,
                    iterations,
                }
            }
        };
        let (head, frozen) = gains.split_at_mut(h + 1);
        let oracle = StageOracle::new(model, cost, frozen, h, n_stages)?;
        let mut estimator = OnePointEstimator::new(oracle, init, expl)?;
        let inspector = needs_model.then_some(Inspector {
            p_next: &p_next,
            log_every: cfg.log_every,
        });
        let (k_h, diag) = run_inner_loop(h, &k_init, rule, &mut estimator, cfg.gradient, inspector, rng)?;
        log::debug!("stage {h}: {} iterations, K = {:?}", rule.iterations, k_h.matrix().as_slice());
        total = total.saturating_add(diag.oracle_calls);
        stage_iterations[h] = diag.oracle_calls;
        diagnostics.push(diag);
        if needs_model {
            p_next = lqr::surrogate_value_update(&p_next, &k_h, model, cost)?;
        }
        head[h] = k_h;
    }
    diagnostics.reverse();

    let k0 = gains[0].clone();
    let (final_gap, stabilizing) = match reference {
        Some(sol) => {
            let gap = matrix::spectral_norm(&(k0.matrix() - sol.k_star.matrix()));
            let report = lqr::check_stabilizing(model, &k0, &sol.p_star)?;
            (Some(gap), Some(report.stabilizing))
        }
        None => (None, None),
    };
    Ok(RhpgResult {
        k0,
        gains,
        stage_iterations,
        tolerances,
        plans,
        diagnostics,
        total_oracle_calls: total,
        final_gap,
        stabilizing,
    })
}

/// Theory plans along the ideal path where every stage lands exactly on its
/// minimizer. Cheap to evaluate; shows what the guarantees would demand.
pub fn theory_plans(problem: Problem<'_>, cfg: &RhpgConfig, xi1_form: Xi1Form) -> Result<Vec<InnerLoopPlan>> {
    check_eps_horizon(cfg.eps, cfg.horizon)?;
    let Problem { model, cost, init } = problem;
    let rde = lqr::solve_rde(model, cost, cfg.horizon)?;
    let bundle = compute_constants(model, cost, &rde)?;
    let tol = tolerance_schedule(cfg.eps, cfg.horizon, &bundle, cost, cfg.variant)?;
    let sigma0 = init.sigma0();
    let mut plans = vec![None; cfg.horizon];
    for h in (0..cfg.horizon).rev() {
        let p_next = rde.value(h + 1);
        let k_init = match cfg.k_init {
            KInitRule::Previous if h + 1 < cfg.horizon => rde.gain(h + 1).clone(),
            _ => PolicyGain::zeros(model.input_dim(), model.state_dim(), Stage::Index(h)),
        };
        let j0 = lqr::exact_surrogate_cost(&k_init, p_next, sigma0, model, cost)?;
        let j_star = lqr::exact_surrogate_cost(rde.gain(h), p_next, sigma0, model, cost)?;
        plans[h] = Some(inner_loop_plan(
            j0,
            Some(j_star),
            &bundle,
            sigma0,
            cost,
            model,
            cfg.sigma,
            init.c_m(),
            cfg.zeta(),
            tol.values[h],
            xi1_form,
        )?);
    }
    Ok(plans.into_iter().map(|p| p.expect("every stage planned")).collect())
}

/// The `ε`-exponent under the prior tolerance schedule, `1 + log C2 / (2 log(1/‖A−BK*‖_*))`,
/// to set beside the exponent 2 of the Riemannian analysis.
pub fn prior_complexity_exponent(bundle: &ConstantsBundle, a_k_star_norm: f64) -> Result<f64> {
    if !(a_k_star_norm > 0.0 && a_k_star_norm < 1.0) {
        return Err(Error::param("a_k_star_norm", format!("must lie in (0, 1), got {a_k_star_norm}")));
    }
    Ok(1.0 + bundle.c2.ln() / (2.0 * (1.0 / a_k_star_norm).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(x: f64) -> PdMatrix {
        PdMatrix::scalar(x).unwrap()
    }

    fn scalar() -> (SystemModel, CostSpec, InitialStateModel) {
        let model = SystemModel::scalar(5.0, 0.33).unwrap();
        let cost = CostSpec::new(s(1.0), s(1.0), s(300.0)).unwrap();
        (model, cost, InitialStateModel::sphere(s(1.0)))
    }

    fn practical(horizon: usize, eps: f64, theta: f64, scale: f64) -> RhpgConfig {
        RhpgConfig {
            horizon,
            eps,
            sigma: 1.0,
            delta_total: 0.1,
            k_init: KInitRule::Zero,
            variant: ScheduleVariant::Riemannian,
            schedule: Schedule::Practical {
                mu: None,
                theta,
                iterations: IterationRule::Scaled(scale),
            },
            gradient: GradientSource::OnePoint,
            log_every: None,
        }
    }

    #[test]
    fn constants_examples() {
        let (model, cost, _) = scalar();
        let rde = lqr::solve_rde(&model, &cost, 3).unwrap();
        let k = compute_constants(&model, &cost, &rde).unwrap();
        assert_eq!(k.a, 0.5);
        assert_relative_eq!(k.c3, 2.0 * (1.0 + 0.1089 * 300.5), max_relative = 1e-12);
        assert!(k.c3 >= 2.0);
        let phi = rde.gains().iter().map(|g| (5.0 - 0.33 * g.matrix()[(0, 0)]).abs()).fold(0.0, f64::max);
        assert_relative_eq!(k.phi, phi, max_relative = 1e-12);
        assert_relative_eq!(k.c1, phi * 0.33, max_relative = 1e-12);
        assert_relative_eq!(k.c2, 2.0 * phi * 5.0 * (1.0 + 300.5 * 0.1089), max_relative = 1e-12);

        let cost2 = CostSpec::new(PdMatrix::scalar(2.0).unwrap(), s(3.0), s(300.0)).unwrap();
        let free = SystemModel::scalar(0.5, 0.0).unwrap();
        let rde = lqr::solve_rde(&free, &cost2, 2).unwrap();
        let k = compute_constants(&free, &cost2, &rde).unwrap();
        assert_eq!(k.a, 1.0);
        assert_eq!(k.c1, 0.0);
        assert_relative_eq!(k.c3, 6.0);
    }

    #[test]
    fn tolerance_examples() {
        let (model, cost, _) = scalar();
        let rde = lqr::solve_rde(&model, &cost, 6).unwrap();
        let k = compute_constants(&model, &cost, &rde).unwrap();
        for variant in [ScheduleVariant::Riemannian, ScheduleVariant::Prior] {
            let t = tolerance_schedule(0.1, 6, &k, &cost, variant).unwrap();
            assert_eq!(t.values[0], 0.025);
            assert!(t.values.iter().all(|v| *v > 0.0));
        }
        let r = tolerance_schedule(0.1, 6, &k, &cost, ScheduleVariant::Riemannian).unwrap();
        assert!(r.values[1..].iter().all(|v| *v == r.values[1]));
        // tiny eps makes the accuracy term bind in the prior variant
        let p = tolerance_schedule(1e-12, 6, &k, &cost, ScheduleVariant::Prior).unwrap();
        for h in 2..5 {
            assert_relative_eq!(p.values[h + 1] / p.values[h], 1.0 / k.c2.sqrt(), max_relative = 1e-12);
        }
        let acc = accuracy_tolerances(1e-12, 6, &k, ScheduleVariant::Prior).unwrap();
        assert_relative_eq!(acc.values[3] / acc.values[2], 1.0 / k.c2.sqrt(), max_relative = 1e-12);
        assert!(tolerance_schedule(0.0, 3, &k, &cost, ScheduleVariant::Prior).is_err());
    }

    #[test]
    fn plan_examples() {
        let (model, cost, init) = scalar();
        let rde = lqr::solve_rde(&model, &cost, 1).unwrap();
        let k = compute_constants(&model, &cost, &rde).unwrap();
        let plan = |zeta| inner_loop_plan(7501.0, None, &k, &s(1.0), &cost, &model, 1.0, init.c_m(), zeta, 0.1, Xi1Form::Squared).unwrap();
        let p = plan(0.1);
        assert_eq!(p.mu, 4.0);
        assert_relative_eq!(p.l, k.c3);
        assert!(p.theta >= 2.0);
        // zeta also moves theta through C~; at fixed theta T scales as 1/zeta
        let half = plan(0.05);
        assert_relative_eq!(half.t_real / half.theta, 2.0 * p.t_real / p.theta, max_relative = 1e-12);
        for t in [0u64, 1, 10, 1000] {
            assert_relative_eq!(p.step_size(t) * p.mu * (t as f64 + p.theta), 2.0, max_relative = 1e-14);
            // theta here is ~1e21, far past where t + 1 registers
            assert!(step_size(p.mu, 2.0, t + 1) < step_size(p.mu, 2.0, t));
        }
        let lin = inner_loop_plan(7501.0, None, &k, &s(1.0), &cost, &model, 1.0, init.c_m(), 0.1, 0.1, Xi1Form::Linear).unwrap();
        assert!(lin.xi1 < p.xi1);
        assert!(inner_loop_plan(0.0, None, &k, &s(1.0), &cost, &model, 1.0, 1.0, 0.1, 0.1, Xi1Form::Squared).is_err());
        // xi3 by hand, m = 1
        let want = p.xi1 * p.xi1 + 6.0 * p.xi1 * p.xi2 + 15.0 * p.xi2 * p.xi2;
        assert_relative_eq!(p.xi3, want, max_relative = 1e-12);
    }

    #[test]
    fn zero_iterations_return_init() {
        let (model, cost, init) = scalar();
        let oracle = StageOracle::new(&model, &cost, &[], 0, 1).unwrap();
        let mut est = OnePointEstimator::new(oracle, &init, ExplorationConfig::new(1.0).unwrap()).unwrap();
        let k0 = PolicyGain::new(DMatrix::from_element(1, 1, 3.0), Stage::Index(0)).unwrap();
        let rule = StepRule {
            mu: 4.0,
            theta: 2.0,
            iterations: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (k, d) = run_inner_loop(0, &k0, rule, &mut est, GradientSource::OnePoint, None, &mut rng).unwrap();
        assert_eq!(k.matrix(), k0.matrix());
        assert_eq!(d.oracle_calls, 0);
    }

    #[test]
    fn exact_gradient_converges() {
        let (model, cost, init) = scalar();
        let q_n = s(300.0);
        let oracle = StageOracle::new(&model, &cost, &[], 0, 1).unwrap();
        let mut est = OnePointEstimator::new(oracle, &init, ExplorationConfig::new(1.0).unwrap()).unwrap();
        let rule = StepRule {
            mu: 4.0,
            theta: 2.0,
            iterations: 10_000,
        };
        let ins = Inspector {
            p_next: &q_n,
            log_every: Some(1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k0 = PolicyGain::zeros(1, 1, Stage::Index(0));
        let (k, d) = run_inner_loop(0, &k0, rule, &mut est, GradientSource::Exact, Some(ins), &mut rng).unwrap();
        let target = lqr::gain_from_value(&q_n, &model, &cost).unwrap();
        assert!((k.matrix() - target.matrix()).norm() <= 1e-6);
        assert_eq!(d.oracle_calls, 10_000);
        let l = 2.0 * (1.0 + 0.1089 * 300.5);
        let mut prev = f64::INFINITY;
        for smp in &d.samples {
            if smp.iteration > 0 && step_size(4.0, 2.0, smp.iteration - 1) <= 1.0 / l {
                assert!(smp.gap <= prev + 1e-12);
            }
            prev = smp.gap;
        }
        for w in d.samples.windows(2) {
            assert_eq!(w[1].oracle_calls, w[0].oracle_calls + 1);
        }
    }

    #[test]
    fn practical_run_is_deterministic() {
        let (model, cost, init) = scalar();
        let sol = lqr::solve_are(&model, &cost, lqr::AreOptions::default()).unwrap();
        let cfg = practical(2, 0.3, 5000.0, 10.0);
        let problem = Problem {
            model: &model,
            cost: &cost,
            init: &init,
        };
        let a = run_rhpg(problem, &cfg, Some(&sol), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = run_rhpg(problem, &cfg, Some(&sol), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_oracle_calls, a.stage_iterations.iter().sum::<u64>());
        assert_eq!(a.gains.len(), 2);
    }

    #[test]
    fn uncontrolled_optimum_is_zero() {
        let model = SystemModel::scalar(0.5, 0.0).unwrap();
        let cost = CostSpec::new(s(1.0), s(1.0), s(2.0)).unwrap();
        let init = InitialStateModel::sphere(s(1.0));
        let sol = lqr::solve_are(&model, &cost, lqr::AreOptions::default()).unwrap();
        let mut cfg = practical(2, 0.1, 50.0, 1.0);
        cfg.schedule = Schedule::Practical {
            mu: None,
            theta: 50.0,
            iterations: IterationRule::PerStage(vec![20_000, 20_000]),
        };
        let problem = Problem {
            model: &model,
            cost: &cost,
            init: &init,
        };
        let r = run_rhpg(problem, &cfg, Some(&sol), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(r.k0.matrix().norm() < 0.05, "{}", r.k0.matrix());
        assert_eq!(r.stabilizing, Some(true));
    }

    #[test]
    fn theory_schedule_hits_budget() {
        let (model, cost, init) = scalar();
        let mut cfg = practical(1, 0.3, 1.0, 1.0);
        cfg.schedule = Schedule::Theory {
            xi1_form: Xi1Form::Squared,
            max_oracle_calls: 1_000_000,
            exact_optimum: true,
        };
        let problem = Problem {
            model: &model,
            cost: &cost,
            init: &init,
        };
        let err = run_rhpg(problem, &cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { stage: 0, .. }), "{err}");
        let plans = theory_plans(problem, &cfg, Xi1Form::Squared).unwrap();
        assert!(plans[0].t_real > 1e12);
    }

    #[test]
    fn exponent_examples() {
        let mut k = ConstantsBundle {
            a: 0.5,
            phi: 1.0,
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
        };
        assert_relative_eq!(prior_complexity_exponent(&k, 0.2).unwrap(), 1.0);
        k.c2 = 10.0;
        let e1 = prior_complexity_exponent(&k, 0.2).unwrap();
        k.c2 = 100.0;
        assert!(prior_complexity_exponent(&k, 0.2).unwrap() > e1);
        assert!(prior_complexity_exponent(&k, 1.0).is_err());
    }
}
