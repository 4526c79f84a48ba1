//! Executable property suites for the theory behind the solver.
//!
//! Each suite runs a batch of independent trials, each on its own RNG stream
//! derived from the suite seed and the trial index, and reports failures
//! together with the worst relative margin seen (`(bound − value) / scale`;
//! negative means violated).

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lqr::{self, AreOptions, CostSpec, PolicyGain, RiccatiSolution, Stage, SystemModel};
use crate::matrix::{self, PdMatrix};
use crate::rollout::{ExplorationConfig, InitialStateModel, OnePointEstimator, StageOracle};
use crate::seeding;
use crate::solver::{self, ScheduleVariant, Xi1Form};

/// Additive slack on the contraction inequality.
pub const CONTRACTION_SLACK: f64 = 1e-9;
/// Completion-of-squares residual allowed, relative to `max(1, ‖P̃‖_F)`.
pub const COMPLETION_TOL: f64 = 1e-10;
/// Finite-difference agreement, relative to `max(1, ‖∇J̃‖_F)`.
pub const FD_TOL: f64 = 1e-6;
/// Allowed excess of the empirical second moment over `ξ₃`.
pub const SECOND_MOMENT_SLACK: f64 = 1.05;
/// Relative rounding allowance on inequalities that can hold with equality.
pub const ROUNDING: f64 = 1e-9;

/// Tight enough that `P*` is exact to rounding for the decay comparison.
const DECAY_ARE: AreOptions = AreOptions {
    tol: 1e-14,
    max_iters: 1_000_000,
};

const TARGET_RADII: [f64; 4] = [0.5, 0.95, 1.5, 3.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: u64,
    pub failures: u64,
    pub worst_margin: f64,
    pub seed: u64,
    /// Why the suite did not run, if it did not.
    pub skipped: Option<String>,
    /// Suite-specific extras, e.g. how many trials met an optional hypothesis.
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str, seed: u64) -> Self {
        Self {
            name,
            trials: 0,
            failures: 0,
            worst_margin: f64::INFINITY,
            seed,
            skipped: None,
            detail: String::new(),
        }
    }

    fn skipped(name: &'static str, seed: u64, why: impl Into<String>) -> Self {
        Self {
            skipped: Some(why.into()),
            ..Self::new(name, seed)
        }
    }

    /// Counts one trial with the given margins; it fails if any is negative.
    fn record(&mut self, margins: &[f64]) {
        self.trials += 1;
        let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
        if !(worst >= 0.0) {
            self.failures += 1;
        }
        self.worst_margin = self.worst_margin.min(if worst.is_nan() { f64::NEG_INFINITY } else { worst });
    }

    fn merge(&mut self, other: SuiteReport) {
        self.trials += other.trials;
        self.failures += other.failures;
        self.worst_margin = self.worst_margin.min(other.worst_margin);
        if let Some(why) = other.skipped {
            self.add_detail(format!("skipped: {why}"));
        }
        if !other.detail.is_empty() {
            self.add_detail(other.detail);
        }
    }

    fn add_detail(&mut self, s: impl AsRef<str>) {
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        self.detail.push_str(s.as_ref());
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {} trials={} failures={} worst_margin={:.3e} seed={}",
            self.name,
            if !self.passed() {
                "FAIL"
            } else if self.skipped.is_some() {
                "SKIP"
            } else {
                "PASS"
            },
            self.trials,
            self.failures,
            self.worst_margin,
            self.seed
        )?;
        if let Some(why) = &self.skipped {
            write!(f, " skipped=\"{why}\"")?;
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

fn rel_margin(bound: f64, value: f64) -> f64 {
    (bound - value) / bound.abs().max(value.abs()).max(f64::MIN_POSITIVE)
}

/// `bound − value` relative to `scale`, with a rounding allowance.
fn margin_with(bound: f64, value: f64, scale: f64) -> f64 {
    (bound - value) / scale.max(f64::MIN_POSITIVE) + ROUNDING
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    seeding::rng_for(seed, trial, 0)
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0))
}

/// `GᵀG + 0.1 I` with standard normal `G`.
pub fn random_pd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> PdMatrix {
    let g = normal_matrix(rng, n, n);
    PdMatrix::new(g.transpose() * &g + DMatrix::identity(n, n) * 0.1).expect("Wishart plus ridge is positive definite")
}

/// A random `A` with the given spectral radius and `σ_min(A) ≥ 1e-3`.
pub fn random_dynamics<R: Rng + ?Sized>(rng: &mut R, n: usize, radius: f64) -> DMatrix<f64> {
    loop {
        let a = uniform_matrix(rng, n, n);
        let rho = match matrix::spectral_radius(&a) {
            Ok(r) if r > 1e-6 => r,
            _ => continue,
        };
        let a = a * (radius / rho);
        if matrix::min_singular_value(&a) >= 1e-3 {
            return a;
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub model: SystemModel,
    pub cost: CostSpec,
    pub sigma0: PdMatrix,
}

impl RandomInstance {
    /// `n` states, `m` inputs, spectral radius of `A` drawn from
    /// `{0.5, 0.95, 1.5, 3}`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Self {
        let radius = TARGET_RADII[rng.random_range(0..TARGET_RADII.len())];
        let a = random_dynamics(rng, n, radius);
        let b = uniform_matrix(rng, n, m);
        let model = SystemModel::new(a, b).expect("shapes are consistent");
        let q = random_pd(rng, n);
        let r = random_pd(rng, m);
        let q_n = random_pd(rng, n);
        let sigma0 = random_pd(rng, n);
        let cost = CostSpec::new(q, r, q_n).expect("shapes are consistent");
        Self { model, cost, sigma0 }
    }

    /// Random dimensions up to `n_max`.
    pub fn sample_up_to<R: Rng + ?Sized>(rng: &mut R, n_max: usize) -> Self {
        let n = rng.random_range(1..=n_max);
        let m = rng.random_range(1..=n);
        Self::sample(rng, n, m)
    }

    /// Replaces `Q_N` with `P* + I` and returns the ARE solution, or `None`
    /// if the pair is numerically not stabilizable.
    pub fn with_dominant_terminal(mut self) -> Option<(Self, RiccatiSolution)> {
        let first = lqr::solve_are(&self.model, &self.cost, AreOptions::default()).ok()?;
        let q_n = first.p_star.shifted(1.0).ok()?;
        self.cost = self.cost.with_terminal(q_n).ok()?;
        let sol = lqr::solve_are(&self.model, &self.cost, AreOptions::default()).ok()?;
        Some((self, sol))
    }
}

/// Samples until the instance is stabilizable and returns it with `Q_N = P* + I`.
pub fn stabilizable_instance<R: Rng + ?Sized>(rng: &mut R, n_max: usize) -> (RandomInstance, RiccatiSolution) {
    loop {
        if let Some(found) = RandomInstance::sample_up_to(rng, n_max).with_dominant_terminal() {
            return found;
        }
    }
}

/// A PD matrix with eigenvalues spread over a few orders of magnitude.
fn random_spread_pd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> PdMatrix {
    let scale = 10f64.powf(rng.random_range(-1.5..=1.5));
    random_pd(rng, n).scaled(scale).expect("positive scale")
}

/// `δ(𝓡(X), 𝓡(Y)) ≤ δ(X, Y) + 1e-9` for invertible `A`.
pub fn check_contraction(seed: u64, n_max: usize, trials: u64) -> Result<SuiteReport> {
    if trials == 0 || n_max == 0 {
        return Err(Error::param("trials", "need at least one trial and n_max >= 1"));
    }
    let mut rep = SuiteReport::new("contraction", seed);
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let inst = RandomInstance::sample_up_to(&mut rng, n_max);
        let n = inst.model.state_dim();
        let x = random_spread_pd(&mut rng, n);
        let y = random_spread_pd(&mut rng, n);
        let before = matrix::riemannian_distance(&x, &y)?;
        let rx = lqr::riccati_operator(&x, &inst.model, &inst.cost)?;
        let ry = lqr::riccati_operator(&y, &inst.model, &inst.cost)?;
        let after = matrix::riemannian_distance(&rx, &ry)?;
        rep.record(&[(before + CONTRACTION_SLACK - after) / before.max(1.0)]);
    }
    Ok(rep)
}

/// Both distance bounds: `‖U−V‖ ≤ ‖V‖e^δ δ` always, and
/// `δ ≤ ‖V⁻¹‖‖U−V‖_F / (1 − ‖V⁻¹‖‖U−V‖)` when the denominator is positive.
pub fn check_delta_bounds(seed: u64, trials: u64) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    let mut rep = SuiteReport::new("delta_bounds", seed);
    let mut upper_tested = 0u64;
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let n = rng.random_range(1..=4);
        let v = random_spread_pd(&mut rng, n);
        // half the pairs are close enough for the upper bound to apply
        let u = if t % 2 == 0 {
            random_spread_pd(&mut rng, n)
        } else {
            let e = normal_matrix(&mut rng, n, n);
            let e = (&e + e.transpose()) * 0.5;
            let scale = rng.random_range(0.01..0.9) * v.min_eigenvalue() / matrix::spectral_norm(&e).max(1e-12);
            PdMatrix::new(v.matrix() + e * scale)?
        };
        let d = matrix::riemannian_distance(&u, &v)?;
        let diff = u.matrix() - v.matrix();
        let diff2 = matrix::spectral_norm(&diff);
        let lower_bound = v.norm() * d.exp() * d;
        let mut margins = vec![margin_with(lower_bound, diff2, lower_bound.max(diff2))];
        let vinv = v.inverse().norm();
        let h = vinv * diff2;
        if h < 1.0 {
            upper_tested += 1;
            let upper = vinv * diff.norm() / (1.0 - h);
            margins.push(margin_with(upper, d, upper.max(d)));
        }
        rep.record(&margins);
    }
    rep.add_detail(format!("upper bound tested in {upper_tested} trials"));
    Ok(rep)
}

/// A single stage of the estimator: which gain, which downstream value, how
/// much exploration noise.
#[derive(Debug, Clone)]
pub struct EstimatorCase {
    pub model: SystemModel,
    pub cost: CostSpec,
    pub init: InitialStateModel,
    pub sigma: f64,
    pub k: PolicyGain,
}

impl EstimatorCase {
    /// Scalar instance, last stage (`P̃ = Q_N = 300`), `K = 0`, `σ = 1`.
    pub fn scalar_default() -> Self {
        let s = |x| PdMatrix::scalar(x).expect("positive");
        Self {
            model: SystemModel::scalar(5.0, 0.33).expect("valid"),
            cost: CostSpec::new(s(1.0), s(1.0), s(300.0)).expect("valid"),
            init: InitialStateModel::sphere(s(1.0)),
            sigma: 1.0,
            k: PolicyGain::zeros(1, 1, Stage::Index(0)),
        }
    }

    fn estimator(&self) -> Result<OnePointEstimator<'_>> {
        let oracle = StageOracle::new(&self.model, &self.cost, &[], 0, 1)?;
        OnePointEstimator::new(oracle, &self.init, ExplorationConfig::new(self.sigma)?)
    }

    pub fn exact_gradient(&self) -> Result<DMatrix<f64>> {
        lqr::exact_surrogate_gradient(&self.k, self.cost.q_terminal(), self.init.sigma0(), &self.model, &self.cost)
    }
}

/// Empirical mean and standard error of the estimator, componentwise.
pub fn estimator_statistics(case: &EstimatorCase, samples: u64, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut est = case.estimator()?;
    let (m, n) = case.k.matrix().shape();
    let mut g = DMatrix::zeros(m, n);
    let mut sum = DMatrix::<f64>::zeros(m, n);
    let mut sum_sq = DMatrix::<f64>::zeros(m, n);
    for _ in 0..samples {
        est.estimate_into(case.k.matrix(), rng, &mut g);
        sum += &g;
        sum_sq += g.component_mul(&g);
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = (sum_sq / k - mean.component_mul(&mean)) * (k / (k - 1.0));
    let se = var.map(|v| (v.max(0.0) / k).sqrt());
    Ok((mean, se))
}

/// Sample mean of the one-point estimator within 3 standard errors of the
/// exact gradient, componentwise. A miss is retried once with 4× samples.
pub fn check_unbiasedness(case: &EstimatorCase, samples: u64, seed: u64) -> Result<SuiteReport> {
    if samples < 2 {
        return Err(Error::param("samples", "need at least two samples"));
    }
    let exact = case.exact_gradient()?;
    let mut rep = SuiteReport::new("unbiasedness", seed);
    let band = |samples: u64, attempt: u64| -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
        let (mean, se) = estimator_statistics(case, samples, &mut seeding::rng_for(seed, 0, attempt))?;
        let worst = mean
            .iter()
            .zip(se.iter())
            .zip(exact.iter())
            .map(|((m, s), e)| (3.0 * s - (m - e).abs()) / (3.0 * s).max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min);
        Ok((worst, mean, se))
    };
    let (mut worst, mut mean, mut se) = band(samples, 0)?;
    if worst < 0.0 {
        rep.add_detail(format!("retried at {} samples", 4 * samples));
        (worst, mean, se) = band(4 * samples, 1)?;
    }
    rep.record(&[worst]);
    rep.add_detail(format!("mean {:.4} vs exact {:.4}, se {:.4}", mean[(0, 0)], exact[(0, 0)], se[(0, 0)]));
    Ok(rep)
}

/// Setup of the second-moment suite: the scalar last stage, where `P̃`
/// equals the exact downstream value and the `‖P̃ − P*‖ ≤ a` hypothesis
/// holds trivially.
#[derive(Debug, Clone)]
pub struct SecondMomentSetup {
    pub case: EstimatorCase,
    /// `K_{h,0}` defining the sublevel set the bound applies on.
    pub k_start: PolicyGain,
    pub zeta: f64,
    pub xi1_form: Xi1Form,
}

impl Default for SecondMomentSetup {
    fn default() -> Self {
        let case = EstimatorCase::scalar_default();
        let k_start = case.k.clone();
        Self {
            case,
            k_start,
            zeta: 0.1,
            xi1_form: Xi1Form::Squared,
        }
    }
}

/// `E‖∇̂‖_F² ≤ ξ₃` for gains in the sublevel set: `K_{h,0}` itself plus
/// `extra_gains` random points of the set.
pub fn check_second_moment(setup: &SecondMomentSetup, samples: u64, extra_gains: u64, seed: u64) -> Result<SuiteReport> {
    if samples == 0 {
        return Err(Error::param("samples", "need at least one sample"));
    }
    let case = &setup.case;
    let (model, cost, sigma0) = (&case.model, &case.cost, case.init.sigma0());
    let p_next = cost.q_terminal();
    let rde = lqr::solve_rde(model, cost, 1)?;
    let bundle = solver::compute_constants(model, cost, &rde)?;
    let j0 = lqr::exact_surrogate_cost(&setup.k_start, p_next, sigma0, model, cost)?;
    let k_star = lqr::gain_from_value(p_next, model, cost)?;
    let j_star = lqr::exact_surrogate_cost(&k_star, p_next, sigma0, model, cost)?;
    let plan = solver::inner_loop_plan(
        j0,
        Some(j_star),
        &bundle,
        sigma0,
        cost,
        model,
        case.sigma,
        case.init.c_m(),
        setup.zeta,
        1.0,
        setup.xi1_form,
    )?;
    let level = 10.0 * j0 / setup.zeta;

    let mut rep = SuiteReport::new("second_moment", seed);
    let (m, n) = setup.k_start.matrix().shape();
    let mut worst_ratio = 0.0f64;
    for g in 0..=extra_gains {
        let mut rng = seeding::rng_for(seed, g, 0);
        let k = if g == 0 {
            setup.k_start.clone()
        } else {
            // rejection-sample a point of the sublevel set inside the C~ ball
            loop {
                let dir = normal_matrix(&mut rng, m, n);
                let radius = plan.c_tilde.sqrt() * rng.random::<f64>();
                let cand = PolicyGain::new(dir.normalize() * radius, Stage::Index(0))?;
                let j = lqr::exact_surrogate_cost(&cand, p_next, sigma0, model, cost)?;
                if j - j_star <= level {
                    break cand;
                }
            }
        };
        let run = |samples: u64, attempt: u64| -> Result<f64> {
            let local = EstimatorCase {
                k: k.clone(),
                ..case.clone()
            };
            let mut est = local.estimator()?;
            let mut buf = DMatrix::zeros(m, n);
            let mut rng = seeding::rng_for(seed, g, attempt + 1);
            let mut acc = 0.0;
            for _ in 0..samples {
                est.estimate_into(k.matrix(), &mut rng, &mut buf);
                acc += buf.norm_squared();
            }
            Ok(acc / samples as f64)
        };
        let mut moment = run(samples, 0)?;
        if moment > SECOND_MOMENT_SLACK * plan.xi3 {
            moment = run(4 * samples, 1)?;
        }
        worst_ratio = worst_ratio.max(moment / plan.xi3);
        rep.record(&[rel_margin(SECOND_MOMENT_SLACK * plan.xi3, moment)]);
    }
    rep.add_detail(format!("xi3 {:.3e}, largest E|g|^2/xi3 {:.3e}", plan.xi3, worst_ratio));
    Ok(rep)
}

/// Strong convexity, smoothness, the PL inequality and finite-difference
/// agreement of the exact surrogate gradient, on random instances.
pub fn check_smoothness_convexity(seed: u64, trials: u64) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    let mut rep = SuiteReport::new("smoothness_convexity", seed);
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let inst = RandomInstance::sample_up_to(&mut rng, 4);
        let (n, m) = (inst.model.state_dim(), inst.model.input_dim());
        // P~ plays the downstream value; taking it as Q_N makes C3 cover it
        let p_next = random_spread_pd(&mut rng, n);
        let cost = inst.cost.with_terminal(p_next.clone())?;
        let model = &inst.model;
        let sigma0 = &inst.sigma0;
        let rde = lqr::solve_rde(model, &cost, 1)?;
        let bundle = solver::compute_constants(model, &cost, &rde)?;
        let mu = solver::strong_convexity(sigma0, &cost);
        let l = solver::smoothness(&bundle, sigma0);
        let scale = 1.0 + rng.random_range(0.0..10.0);
        let k1 = PolicyGain::new(normal_matrix(&mut rng, m, n) * scale, Stage::Index(0))?;
        let k2 = PolicyGain::new(normal_matrix(&mut rng, m, n) * scale, Stage::Index(0))?;
        let grad = |k: &PolicyGain| lqr::exact_surrogate_gradient(k, &p_next, sigma0, model, &cost);
        let cost_at = |k: &DMatrix<f64>| -> Result<f64> {
            let g = PolicyGain::new(k.clone(), Stage::Index(0))?;
            lqr::exact_surrogate_cost(&g, &p_next, sigma0, model, &cost)
        };
        let (g1, g2) = (grad(&k1)?, grad(&k2)?);
        let dk = k2.matrix() - k1.matrix();
        let dg = &g2 - &g1;
        let inner = dg.dot(&dk);
        let sc_bound = 0.5 * mu * dk.norm_squared();
        let lip_bound = l * dk.norm();
        let k_star = lqr::gain_from_value(&p_next, model, &cost)?;
        let j_star = cost_at(k_star.matrix())?;
        let j1 = cost_at(k1.matrix())?;
        let pl_rhs = mu * (j1 - j_star);

        // central differences; the cost is quadratic so these are exact up to rounding
        let step = 1e-4 * (1.0 + k1.matrix().amax());
        let mut fd = DMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut kp = k1.matrix().clone();
                let mut km = k1.matrix().clone();
                kp[(i, j)] += step;
                km[(i, j)] -= step;
                fd[(i, j)] = (cost_at(&kp)? - cost_at(&km)?) / (2.0 * step);
            }
        }
        let fd_err = (&fd - &g1).norm();

        rep.record(&[
            margin_with(inner, sc_bound, inner.max(sc_bound)),
            margin_with(lip_bound, dg.norm(), lip_bound.max(dg.norm())),
            margin_with(g1.norm_squared(), pl_rhs, g1.norm_squared().max(pl_rhs)),
            rel_margin(FD_TOL * g1.norm().max(1.0), fd_err),
        ]);
    }
    Ok(rep)
}

/// Exponential decay of the Riccati recursion towards `P*` and the induced
/// gain bound:
///
/// `‖P*_t − P*‖_* ≤ ‖A−BK*‖_*^{2(N−t)} ‖Q_N − P*‖_*` for every `t`, and
/// `‖K*_0 − K*‖ ≤ (‖A−BK*‖‖B‖/λ_min(R)) ‖P*_1 − P*‖`.
pub fn check_rde_decay(model: &SystemModel, cost: &CostSpec, horizon: usize, seed: u64) -> Result<SuiteReport> {
    const NAME: &str = "rde_decay";
    if horizon == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    let sol = match lqr::solve_are(model, cost, DECAY_ARE) {
        Ok(s) => s,
        Err(e) => return Ok(SuiteReport::skipped(NAME, seed, format!("no stabilizing solution: {e}"))),
    };
    if !cost.terminal_dominates(&sol.p_star)? {
        return Ok(SuiteReport::skipped(NAME, seed, "terminal weight does not dominate P*"));
    }
    let p_star = &sol.p_star;
    // once P*_t is within rounding of P* the left side is pure noise
    let noise = (1e3 * f64::EPSILON + sol.residual) * p_star.norm() * matrix::condition_number(p_star);
    let acl = lqr::closed_loop(model, &sol.k_star)?;
    let rate = matrix::induced_norm(&acl, p_star)?;
    let initial = matrix::induced_norm(&(cost.q_terminal().matrix() - p_star.matrix()), p_star)?;
    let rde = lqr::solve_rde(model, cost, horizon)?;
    let mut rep = SuiteReport::new(NAME, seed);
    let mut margins = Vec::with_capacity(horizon + 2);
    for t in 0..=horizon {
        let lhs = matrix::induced_norm(&(rde.value(t).matrix() - p_star.matrix()), p_star)?;
        let rhs = rate.powi(2 * (horizon - t) as i32) * initial;
        margins.push(margin_with(rhs + noise, lhs, rhs.max(lhs).max(noise)));
    }
    let k_gap = matrix::spectral_norm(&(rde.gain(0).matrix() - sol.k_star.matrix()));
    let p1_gap = matrix::spectral_norm(&(rde.value(1).matrix() - p_star.matrix()));
    let k_bound = matrix::spectral_norm(&acl) * matrix::spectral_norm(model.b()) / cost.r().min_eigenvalue() * p1_gap;
    let k_noise = 1e3 * f64::EPSILON * sol.k_star.matrix().norm().max(1.0);
    margins.push(margin_with(k_bound + k_noise, k_gap, k_bound.max(k_gap).max(k_noise)));
    rep.record(&margins);
    Ok(rep)
}

/// The same decay in Loewner order: `P*_t − P* ⪯ (A_K^{N−t})ᵀ(Q_N − P*)A_K^{N−t}`
/// with `A_K = A − BK*`. Reported beside [`check_rde_decay`] as a diagnostic.
pub fn loewner_decay_holds(model: &SystemModel, cost: &CostSpec, sol: &RiccatiSolution, horizon: usize) -> Result<bool> {
    let acl = lqr::closed_loop(model, &sol.k_star)?;
    let rde = lqr::solve_rde(model, cost, horizon)?;
    let top = cost.q_terminal().matrix() - sol.p_star.matrix();
    let n = model.state_dim();
    let mut power = DMatrix::identity(n, n);
    let noise = (1e3 * f64::EPSILON + sol.residual) * sol.p_star.norm();
    for t in (0..horizon).rev() {
        power = &acl * power;
        let bound = power.transpose() * &top * &power;
        let gap = &bound - (rde.value(t).matrix() - sol.p_star.matrix());
        if matrix::symmetric_eigenvalues(&gap)?.min() < -(noise + ROUNDING * bound.norm()) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Outcome of one synthetic outer-loop run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationOutcome {
    pub final_gap: f64,
    /// `min_t (a − ‖P*_t − P̃_t‖)/a` over `t = N−1 … 1`.
    pub a_margin: f64,
    /// `min_t (ε̄ − δ(P̃*_t, P̃_t))/ε̄` over `t = N−1 … 1`.
    pub delta_margin: f64,
    pub stabilizing: bool,
    /// `1 − ρ(A − BK̃_0)`.
    pub stability_margin: f64,
}

/// How perturbations are oriented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Exact stage minimizers.
    None,
    /// Random rank-one direction, norm exactly `ς_{h,ε}`.
    Random,
    /// All entries of `ΔK` share one sign (the worst case in one dimension).
    Aligned(bool),
}

/// Constants of the synthetic outer-loop run.
#[derive(Debug, Clone)]
pub struct PropagationSetup {
    pub horizon: usize,
    pub tolerances: Vec<f64>,
    pub a: f64,
    /// `(1/N)·min{ε/(8eC1‖Q_N‖), a/(2e‖Q_N‖), 1}`.
    pub eps_bar: f64,
    /// `(1 − ‖A−BK*‖_*)/(κ^{1/2}‖B‖)`; below this `K̃_0` must stabilize.
    pub stabilizing_threshold: f64,
    pub rde: lqr::ValueSequence,
}

pub fn propagation_setup(model: &SystemModel, cost: &CostSpec, sol: &RiccatiSolution, eps: f64) -> Result<PropagationSetup> {
    let horizon = lqr::horizon_for_accuracy(sol, model, cost, eps)?;
    let rde = lqr::solve_rde(model, cost, horizon)?;
    let bundle = solver::compute_constants(model, cost, &rde)?;
    let tol = solver::tolerance_schedule(eps, horizon, &bundle, cost, ScheduleVariant::Riemannian)?;
    let e = std::f64::consts::E;
    let qn = cost.q_terminal().norm();
    let eps_bar = (eps / (8.0 * e * bundle.c1 * qn)).min(bundle.a / (2.0 * e * qn)).min(1.0) / horizon as f64;
    let rate = matrix::induced_norm(&lqr::closed_loop(model, &sol.k_star)?, &sol.p_star)?;
    let threshold = (1.0 - rate) / (matrix::condition_number(&sol.p_star).sqrt() * matrix::spectral_norm(model.b()));
    Ok(PropagationSetup {
        horizon,
        tolerances: tol.values,
        a: bundle.a,
        eps_bar,
        stabilizing_threshold: threshold,
        rde,
    })
}

/// Runs the outer loop with every stage landing at distance exactly
/// `ς_{h,ε}` from its minimizer.
pub fn propagate_perturbed<R: Rng + ?Sized>(
    model: &SystemModel,
    cost: &CostSpec,
    sol: &RiccatiSolution,
    setup: &PropagationSetup,
    kind: Perturbation,
    rng: &mut R,
) -> Result<PropagationOutcome> {
    let (m, n) = (model.input_dim(), model.state_dim());
    let mut p_next = cost.q_terminal().clone();
    let mut a_margin = f64::INFINITY;
    let mut delta_margin = f64::INFINITY;
    let mut k_tilde = PolicyGain::zeros(m, n, Stage::Index(0));
    for h in (0..setup.horizon).rev() {
        let k_star = lqr::gain_from_value(&p_next, model, cost)?;
        let dk = match kind {
            Perturbation::None => DMatrix::zeros(m, n),
            Perturbation::Random => {
                let u: DVector<f64> = DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
                let v: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
                u.normalize() * v.normalize().transpose() * setup.tolerances[h]
            }
            Perturbation::Aligned(positive) => {
                let sign = if positive { 1.0 } else { -1.0 };
                DMatrix::from_element(m, n, sign / ((m * n) as f64).sqrt()) * setup.tolerances[h]
            }
        };
        k_tilde = PolicyGain::new(k_star.matrix() + dk, Stage::Index(h))?;
        if h == 0 {
            break;
        }
        let p_opt = lqr::riccati_operator(&p_next, model, cost)?;
        let p_here = lqr::surrogate_value_update(&p_next, &k_tilde, model, cost)?;
        let dist = matrix::spectral_norm(&(setup.rde.value(h).matrix() - p_here.matrix()));
        a_margin = a_margin.min((setup.a - dist) / setup.a);
        let d = matrix::riemannian_distance(&p_opt, &p_here)?;
        delta_margin = delta_margin.min((setup.eps_bar - d) / setup.eps_bar);
        p_next = p_here;
    }
    let final_gap = matrix::spectral_norm(&(k_tilde.matrix() - sol.k_star.matrix()));
    let report = lqr::check_stabilizing(model, &k_tilde, &sol.p_star)?;
    Ok(PropagationOutcome {
        final_gap,
        a_margin,
        delta_margin,
        stabilizing: report.stabilizing,
        stability_margin: 1.0 - report.spectral_radius,
    })
}

/// Synthetic check of the outer-loop guarantee on one instance: perturb
/// every stage by exactly its tolerance, then require the final gap within
/// `ε`, the stagewise invariants, and stability below the threshold.
pub fn check_outer_loop_propagation(model: &SystemModel, cost: &CostSpec, eps: f64, seed: u64, trials: u64) -> Result<SuiteReport> {
    const NAME: &str = "outer_loop_propagation";
    if !model.a_invertible() {
        return Ok(SuiteReport::skipped(NAME, seed, "A is not invertible"));
    }
    let sol = match lqr::solve_are(model, cost, AreOptions::default()) {
        Ok(s) => s,
        Err(e) => return Ok(SuiteReport::skipped(NAME, seed, format!("no stabilizing solution: {e}"))),
    };
    if !cost.terminal_dominates(&sol.p_star)? {
        return Ok(SuiteReport::skipped(NAME, seed, "terminal weight does not dominate P*"));
    }
    let setup = propagation_setup(model, cost, &sol, eps)?;
    let check_stab = eps < setup.stabilizing_threshold;
    let mut rep = SuiteReport::new(NAME, seed);
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        // the first two trials take the sign-aligned extremes
        let kind = match t {
            0 => Perturbation::Aligned(true),
            1 => Perturbation::Aligned(false),
            _ => Perturbation::Random,
        };
        let out = propagate_perturbed(model, cost, &sol, &setup, kind, &mut rng)?;
        let mut margins = vec![rel_margin(eps, out.final_gap), out.a_margin, out.delta_margin];
        if check_stab {
            margins.push(if out.stabilizing { out.stability_margin } else { -1.0 });
        }
        rep.record(&margins);
    }
    rep.add_detail(format!(
        "N={}, eps_bar={:.3e}, stability {}",
        setup.horizon,
        setup.eps_bar,
        if check_stab { "checked" } else { "not checked (eps above threshold)" }
    ));
    Ok(rep)
}

/// `𝓡(P) − P̃(K) = −(K̃* − K)ᵀ(R + BᵀPB)(K̃* − K)` on random data.
pub fn check_completion_of_squares(seed: u64, trials: u64) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    let mut rep = SuiteReport::new("completion_of_squares", seed);
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let inst = RandomInstance::sample_up_to(&mut rng, 4);
        let (n, m) = (inst.model.state_dim(), inst.model.input_dim());
        let p_next = random_spread_pd(&mut rng, n);
        let k = PolicyGain::new(normal_matrix(&mut rng, m, n) * rng.random_range(0.1..10.0), Stage::Index(0))?;
        let residual = completion_residual(&inst.model, &inst.cost, &p_next, &k)?;
        rep.record(&[rel_margin(COMPLETION_TOL, residual)]);
    }
    Ok(rep)
}

/// `‖(𝓡(P) − P̃(K)) + (K̃* − K)ᵀ(R + BᵀPB)(K̃* − K)‖_F / max(1, ‖P̃(K)‖_F)`.
pub fn completion_residual(model: &SystemModel, cost: &CostSpec, p_next: &PdMatrix, k: &PolicyGain) -> Result<f64> {
    let p_opt = lqr::riccati_operator(p_next, model, cost)?;
    let p_k = lqr::surrogate_value_update(p_next, k, model, cost)?;
    let k_opt = lqr::gain_from_value(p_next, model, cost)?;
    let dk = k_opt.matrix() - k.matrix();
    let b = model.b();
    let hess = cost.r().matrix() + b.transpose() * p_next.matrix() * b;
    let rhs = -(dk.transpose() * hess * &dk);
    let lhs = p_opt.matrix() - p_k.matrix();
    Ok((lhs - rhs).norm() / p_k.matrix().norm().max(1.0))
}

/// The suites reachable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Contraction,
    DeltaBounds,
    Unbiasedness,
    SecondMoment,
    SmoothnessConvexity,
    RdeDecay,
    OuterLoopPropagation,
    CompletionOfSquares,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Contraction,
        Suite::DeltaBounds,
        Suite::Unbiasedness,
        Suite::SecondMoment,
        Suite::SmoothnessConvexity,
        Suite::RdeDecay,
        Suite::OuterLoopPropagation,
        Suite::CompletionOfSquares,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Contraction => "contraction",
            Suite::DeltaBounds => "delta_bounds",
            Suite::Unbiasedness => "unbiasedness",
            Suite::SecondMoment => "second_moment",
            Suite::SmoothnessConvexity => "smoothness_convexity",
            Suite::RdeDecay => "rde_decay",
            Suite::OuterLoopPropagation => "outer_loop_propagation",
            Suite::CompletionOfSquares => "completion_of_squares",
        }
    }

    /// Trial (or sample) count used when none is given.
    pub fn default_trials(self) -> u64 {
        match self {
            Suite::Contraction | Suite::DeltaBounds | Suite::SmoothnessConvexity | Suite::CompletionOfSquares => 1000,
            Suite::Unbiasedness => 1_000_000,
            Suite::SecondMoment => 100_000,
            Suite::RdeDecay => 100,
            Suite::OuterLoopPropagation => 100,
        }
    }

    /// Runs the suite. `trials` means samples for the two statistical
    /// suites, random instances for `rde_decay`, and runs per instance for
    /// `outer_loop_propagation`.
    pub fn run(self, seed: u64, trials: Option<u64>) -> Result<SuiteReport> {
        let trials = trials.unwrap_or_else(|| self.default_trials());
        match self {
            Suite::Contraction => check_contraction(seed, 4, trials),
            Suite::DeltaBounds => check_delta_bounds(seed, trials),
            Suite::Unbiasedness => check_unbiasedness(&EstimatorCase::scalar_default(), trials, seed),
            Suite::SecondMoment => check_second_moment(&SecondMomentSetup::default(), trials, 4, seed),
            Suite::SmoothnessConvexity => check_smoothness_convexity(seed, trials),
            Suite::RdeDecay => rde_decay_suite(seed, trials),
            Suite::OuterLoopPropagation => outer_loop_suite(seed, 20, trials, 0.1),
            Suite::CompletionOfSquares => check_completion_of_squares(seed, trials),
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == key)
            .ok_or_else(|| Error::param("suite", format!("unknown suite {s:?}; known: {}", Suite::ALL.map(Suite::name).join(", "))))
    }
}

fn scalar_instance() -> (SystemModel, CostSpec) {
    let case = EstimatorCase::scalar_default();
    (case.model, case.cost)
}

/// Scalar instance with `N = 8`, then `instances` random stabilizable ones
/// (`n ≤ 4`, `Q_N = P* + I`, `N = 10`).
pub fn rde_decay_suite(seed: u64, instances: u64) -> Result<SuiteReport> {
    let (model, cost) = scalar_instance();
    let mut rep = check_rde_decay(&model, &cost, 8, seed)?;
    let scalar_margin = rep.worst_margin;
    let mut random = SuiteReport::new("rde_decay", seed);
    let mut loewner = 0;
    for i in 0..instances {
        let mut rng = seeding::rng_for(seed, 1, i);
        let (inst, _) = stabilizable_instance(&mut rng, 4);
        random.merge(check_rde_decay(&inst.model, &inst.cost, 10, seed)?);
        let sol = lqr::solve_are(&inst.model, &inst.cost, DECAY_ARE)?;
        if loewner_decay_holds(&inst.model, &inst.cost, &sol, 10)? {
            loewner += 1;
        }
    }
    rep.add_detail(format!(
        "scalar margin {:.3e}; random instances {} failures of {}; Loewner-order form holds on {loewner}/{instances}",
        scalar_margin, random.failures, random.trials
    ));
    random.detail.clear();
    rep.merge(random);
    Ok(rep)
}

/// Scalar instance plus `instances` random invertible-`A` instances,
/// `runs` perturbation draws on each.
pub fn outer_loop_suite(seed: u64, instances: u64, runs: u64, eps: f64) -> Result<SuiteReport> {
    let (model, cost) = scalar_instance();
    let sol = lqr::solve_are(&model, &cost, AreOptions::default())?;
    let scalar_cost = cost.with_terminal(cost.q_terminal().clone())?;
    debug_assert!(scalar_cost.terminal_dominates(&sol.p_star)?);
    let mut rep = check_outer_loop_propagation(&model, &cost, eps, seed, runs)?;
    let mut stab_checked = 0;
    for i in 0..instances {
        let mut rng = seeding::rng_for(seed, 2, i);
        let (inst, _) = stabilizable_instance(&mut rng, 4);
        let sub = check_outer_loop_propagation(&inst.model, &inst.cost, eps, seeding::mix_seed(seed, 2, i), runs)?;
        if sub.detail.contains("stability checked") {
            stab_checked += 1;
        }
        rep.trials += sub.trials;
        rep.failures += sub.failures;
        rep.worst_margin = rep.worst_margin.min(sub.worst_margin);
        if let Some(why) = sub.skipped {
            rep.add_detail(format!("instance {i} skipped: {why}"));
        }
    }
    rep.add_detail(format!("{instances} random instances, stability checked on {stab_checked}"));
    Ok(rep)
}
