//! Simulated plant: initial-state sampling, rollouts under frozen gains and
//! the cost-to-go oracle. The solver sees the system only through here.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lqr::{CostSpec, PolicyGain, SystemModel};
use crate::matrix::{self, PdMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialStateScheme {
    /// `Σ0^{1/2} z` with `z` uniform on the sphere of radius `√n`.
    #[default]
    Sphere,
}

/// Distribution of `x0`: zero mean, covariance `Σ0`, `‖x0‖² ≤ C_m`.
#[derive(Debug, Clone)]
pub struct InitialStateModel {
    sigma0: PdMatrix,
    sqrt: DMatrix<f64>,
    c_m: f64,
    scheme: InitialStateScheme,
}

impl InitialStateModel {
    pub fn new(sigma0: PdMatrix, scheme: InitialStateScheme) -> Self {
        let sqrt = matrix::pd_sqrt(&sigma0).into_matrix();
        let c_m = sigma0.dim() as f64 * sigma0.max_eigenvalue();
        Self { sigma0, sqrt, c_m, scheme }
    }

    pub fn sphere(sigma0: PdMatrix) -> Self {
        Self::new(sigma0, InitialStateScheme::Sphere)
    }

    pub fn sigma0(&self) -> &PdMatrix {
        &self.sigma0
    }

    /// Almost-sure bound on `‖x0‖²`.
    pub fn c_m(&self) -> f64 {
        self.c_m
    }

    pub fn scheme(&self) -> InitialStateScheme {
        self.scheme
    }

    pub fn dim(&self) -> usize {
        self.sigma0.dim()
    }

    /// Writes a draw into `out`, using `scratch` (length n) for the direction.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, scratch: &mut DVector<f64>, out: &mut DVector<f64>) {
        match self.scheme {
            InitialStateScheme::Sphere => {
                let n = self.dim();
                let norm = loop {
                    for z in scratch.iter_mut() {
                        *z = rng.sample(StandardNormal);
                    }
                    let norm = scratch.norm();
                    if norm > 0.0 {
                        break norm;
                    }
                };
                *scratch *= (n as f64).sqrt() / norm;
                out.gemv(1.0, &self.sqrt, scratch, 0.0);
            }
        }
    }
}

pub fn sample_initial_state<R: Rng + ?Sized>(init: &InitialStateModel, rng: &mut R) -> DVector<f64> {
    let n = init.dim();
    let mut scratch = DVector::zeros(n);
    let mut out = DVector::zeros(n);
    init.sample_into(rng, &mut scratch, &mut out);
    out
}

/// Exploration noise scale `σ` in `u0 = −K x0 + σ η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationConfig {
    sigma: f64,
}

impl ExplorationConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param("sigma", format!("must be positive and finite, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// `x_0 … x_{N−h}`.
    pub states: Vec<DVector<f64>>,
    /// `u_0 … u_{N−h−1}`.
    pub inputs: Vec<DVector<f64>>,
    /// Running costs followed by the terminal cost.
    pub stage_costs: Vec<f64>,
    pub total: f64,
}

/// Cost-to-go `Q_h(x0, u0)` from stage `h` of an `N`-stage problem, with the
/// gains of stages `h+1 … N−1` frozen.
///
/// Buffers are allocated once so repeated evaluation in the inner loop does
/// not touch the allocator.
#[derive(Debug, Clone)]
pub struct StageOracle<'a> {
    model: &'a SystemModel,
    cost: &'a CostSpec,
    frozen: &'a [PolicyGain],
    x: DVector<f64>,
    x_next: DVector<f64>,
    u: DVector<f64>,
    qx: DVector<f64>,
    ru: DVector<f64>,
}

impl<'a> StageOracle<'a> {
    /// `frozen[i]` is the gain applied at stage `h + 1 + i`.
    pub fn new(model: &'a SystemModel, cost: &'a CostSpec, frozen: &'a [PolicyGain], h: usize, horizon: usize) -> Result<Self> {
        cost.check(model)?;
        if h >= horizon {
            return Err(Error::param("h", format!("stage {h} outside horizon {horizon}")));
        }
        if frozen.len() != horizon - 1 - h {
            return Err(Error::dims("StageOracle::new", format!("{} frozen gains", horizon - 1 - h), frozen.len()));
        }
        let (n, m) = (model.state_dim(), model.input_dim());
        for k in frozen {
            if k.matrix().shape() != (m, n) {
                return Err(Error::dims(
                    "StageOracle::new",
                    format!("{m}x{n} gain"),
                    format!("{:?}", k.matrix().shape()),
                ));
            }
        }
        Ok(Self {
            model,
            cost,
            frozen,
            x: DVector::zeros(n),
            x_next: DVector::zeros(n),
            u: DVector::zeros(m),
            qx: DVector::zeros(n),
            ru: DVector::zeros(m),
        })
    }

    pub fn model(&self) -> &'a SystemModel {
        self.model
    }

    pub fn cost(&self) -> &'a CostSpec {
        self.cost
    }

    pub fn frozen(&self) -> &'a [PolicyGain] {
        self.frozen
    }

    fn check_point(&self, x0: &DVector<f64>, u0: &DVector<f64>) -> Result<()> {
        if x0.len() != self.model.state_dim() || u0.len() != self.model.input_dim() {
            return Err(Error::dims(
                "cost_to_go",
                format!("x0 of {} and u0 of {}", self.model.state_dim(), self.model.input_dim()),
                format!("x0 of {} and u0 of {}", x0.len(), u0.len()),
            ));
        }
        Ok(())
    }

    /// `Q_h(x0, u0)`; one oracle call.
    pub fn cost_to_go(&mut self, x0: &DVector<f64>, u0: &DVector<f64>) -> Result<f64> {
        self.check_point(x0, u0)?;
        Ok(self.evaluate(x0, u0))
    }

    pub(crate) fn evaluate(&mut self, x0: &DVector<f64>, u0: &DVector<f64>) -> f64 {
        let (a, b) = (self.model.a(), self.model.b());
        let (q, r) = (self.cost.q().matrix(), self.cost.r().matrix());
        self.x.copy_from(x0);
        self.u.copy_from(u0);
        let mut total = 0.0;
        for i in 0..=self.frozen.len() {
            if i > 0 {
                self.u.gemv(-1.0, self.frozen[i - 1].matrix(), &self.x, 0.0);
            }
            self.qx.gemv(1.0, q, &self.x, 0.0);
            self.ru.gemv(1.0, r, &self.u, 0.0);
            total += self.x.dot(&self.qx) + self.u.dot(&self.ru);
            self.x_next.gemv(1.0, a, &self.x, 0.0);
            self.x_next.gemv(1.0, b, &self.u, 1.0);
            std::mem::swap(&mut self.x, &mut self.x_next);
        }
        self.qx.gemv(1.0, self.cost.q_terminal().matrix(), &self.x, 0.0);
        total + self.x.dot(&self.qx)
    }

    /// Same value as [`cost_to_go`](Self::cost_to_go), with the trajectory.
    pub fn rollout(&self, x0: &DVector<f64>, u0: &DVector<f64>) -> Result<TrajectoryRecord> {
        self.check_point(x0, u0)?;
        let (a, b) = (self.model.a(), self.model.b());
        let (q, r) = (self.cost.q().matrix(), self.cost.r().matrix());
        let steps = self.frozen.len() + 1;
        let mut states = Vec::with_capacity(steps + 1);
        let mut inputs = Vec::with_capacity(steps);
        let mut stage_costs = Vec::with_capacity(steps + 1);
        let mut x = x0.clone();
        for i in 0..steps {
            let u = if i == 0 { u0.clone() } else { -(self.frozen[i - 1].matrix() * &x) };
            stage_costs.push(x.dot(&(q * &x)) + u.dot(&(r * &u)));
            let next = a * &x + b * &u;
            states.push(std::mem::replace(&mut x, next));
            inputs.push(u);
        }
        stage_costs.push(x.dot(&(self.cost.q_terminal().matrix() * &x)));
        states.push(x);
        let total = stage_costs.iter().sum();
        Ok(TrajectoryRecord {
            states,
            inputs,
            stage_costs,
            total,
        })
    }
}

/// One-shot `Q_h(x0, u0)` and its trajectory.
pub fn rollout_cost_to_go(
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    frozen: &[PolicyGain],
    model: &SystemModel,
    cost: &CostSpec,
    h: usize,
    horizon: usize,
) -> Result<(f64, TrajectoryRecord)> {
    let oracle = StageOracle::new(model, cost, frozen, h, horizon)?;
    let record = oracle.rollout(x0, u0)?;
    Ok((record.total, record))
}

/// The one-point estimator `−(1/σ) Q_h(x0, −K x0 + σ η) η x0ᵀ` with reusable
/// buffers. Each draw is exactly one oracle call.
#[derive(Debug, Clone)]
pub struct OnePointEstimator<'a> {
    oracle: StageOracle<'a>,
    init: &'a InitialStateModel,
    sigma: f64,
    x0: DVector<f64>,
    eta: DVector<f64>,
    u0: DVector<f64>,
    scratch: DVector<f64>,
    calls: u64,
}

impl<'a> OnePointEstimator<'a> {
    pub fn new(oracle: StageOracle<'a>, init: &'a InitialStateModel, expl: ExplorationConfig) -> Result<Self> {
        let (n, m) = (oracle.model().state_dim(), oracle.model().input_dim());
        if init.dim() != n {
            return Err(Error::dims("OnePointEstimator::new", n, init.dim()));
        }
        Ok(Self {
            oracle,
            init,
            sigma: expl.sigma(),
            x0: DVector::zeros(n),
            eta: DVector::zeros(m),
            u0: DVector::zeros(m),
            scratch: DVector::zeros(n),
            calls: 0,
        })
    }

    pub fn oracle_calls(&self) -> u64 {
        self.calls
    }

    pub fn oracle(&self) -> &StageOracle<'a> {
        &self.oracle
    }

    pub fn initial_state(&self) -> &'a InitialStateModel {
        self.init
    }

    /// Draws `x0`, `η`, queries the oracle and returns the scalar
    /// `c = −Q_h/σ`, so that the estimate is `c η x0ᵀ`.
    fn draw<R: Rng + ?Sized>(&mut self, k: &DMatrix<f64>, rng: &mut R) -> f64 {
        self.init.sample_into(rng, &mut self.scratch, &mut self.x0);
        for e in self.eta.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        self.coefficient(k)
    }

    fn coefficient(&mut self, k: &DMatrix<f64>) -> f64 {
        self.u0.copy_from(&self.eta);
        self.u0.gemv(-1.0, k, &self.x0, self.sigma);
        self.calls += 1;
        -self.oracle.evaluate(&self.x0, &self.u0) / self.sigma
    }

    /// Writes a fresh estimate into `out`.
    pub fn estimate_into<R: Rng + ?Sized>(&mut self, k: &DMatrix<f64>, rng: &mut R, out: &mut DMatrix<f64>) {
        let c = self.draw(k, rng);
        out.ger(c, &self.eta, &self.x0, 0.0);
    }

    /// `K ← K − α ∇̂(K)` in place. Returns the estimate's scale `c`.
    pub fn descend<R: Rng + ?Sized>(&mut self, k: &mut DMatrix<f64>, alpha: f64, rng: &mut R) -> f64 {
        let c = self.draw(k, rng);
        k.ger(-alpha * c, &self.eta, &self.x0, 1.0);
        c
    }

    /// Estimate at caller-chosen `x0` and `η`. Testing hook; the solver
    /// never uses it.
    pub fn estimate_at(&mut self, k: &DMatrix<f64>, x0: &DVector<f64>, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if x0.len() != self.x0.len() || eta.len() != self.eta.len() {
            return Err(Error::dims(
                "estimate_at",
                format!("x0 of {}, eta of {}", self.x0.len(), self.eta.len()),
                format!("x0 of {}, eta of {}", x0.len(), eta.len()),
            ));
        }
        self.x0.copy_from(x0);
        self.eta.copy_from(eta);
        let c = self.coefficient(k);
        Ok(&self.eta * self.x0.transpose() * c)
    }
}

/// One draw of the one-point estimator and the oracle calls it used (always 1).
#[allow(clippy::too_many_arguments)]
pub fn one_point_gradient_estimate<R: Rng + ?Sized>(
    k: &PolicyGain,
    h: usize,
    horizon: usize,
    frozen: &[PolicyGain],
    model: &SystemModel,
    cost: &CostSpec,
    init: &InitialStateModel,
    expl: ExplorationConfig,
    rng: &mut R,
) -> Result<(DMatrix<f64>, u64)> {
    let oracle = StageOracle::new(model, cost, frozen, h, horizon)?;
    let mut est = OnePointEstimator::new(oracle, init, expl)?;
    let (m, n) = (model.input_dim(), model.state_dim());
    if k.matrix().shape() != (m, n) {
        return Err(Error::dims(
            "one_point_gradient_estimate",
            format!("{m}x{n}"),
            format!("{:?}", k.matrix().shape()),
        ));
    }
    let mut out = DMatrix::zeros(m, n);
    est.estimate_into(k.matrix(), rng, &mut out);
    Ok((out, est.oracle_calls()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::{self, Stage};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar() -> (SystemModel, CostSpec) {
        let model = SystemModel::scalar(5.0, 0.33).unwrap();
        let s = |x| PdMatrix::scalar(x).unwrap();
        (model, CostSpec::new(s(1.0), s(1.0), s(300.0)).unwrap())
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn sphere_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = InitialStateModel::sphere(PdMatrix::scalar(1.0).unwrap());
        for _ in 0..100 {
            let x = sample_initial_state(&init, &mut rng);
            assert_relative_eq!(x[0].abs(), 1.0, epsilon = 1e-15);
        }
        let init = InitialStateModel::sphere(PdMatrix::identity(2));
        assert_eq!(init.c_m(), 2.0);
        for _ in 0..100 {
            let x = sample_initial_state(&init, &mut rng);
            assert_relative_eq!(x.norm_squared(), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma0 = PdMatrix::from_diagonal(&[2.0, 1.0]).unwrap();
        let init = InitialStateModel::sphere(sigma0.clone());
        let draws = 1_000_000;
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        let mut mean = DVector::<f64>::zeros(2);
        for _ in 0..draws {
            let x = sample_initial_state(&init, &mut rng);
            assert!(x.norm_squared() <= init.c_m() * (1.0 + 1e-12));
            cov += &x * x.transpose();
            mean += x;
        }
        cov /= draws as f64;
        mean /= draws as f64;
        assert!((cov - sigma0.matrix()).abs().max() < 0.01);
        assert!(mean.abs().max() < 0.01);
    }

    #[test]
    fn rollout_examples() {
        let (model, cost) = scalar();
        let (q, rec) = rollout_cost_to_go(&v(&[1.0]), &v(&[0.0]), &[], &model, &cost, 4, 5).unwrap();
        assert_eq!(q, 7501.0);
        assert_eq!(rec.states.len(), 2);
        let (q, _) = rollout_cost_to_go(&v(&[0.0]), &v(&[0.0]), &[], &model, &cost, 0, 1).unwrap();
        assert_eq!(q, 0.0);
        assert!(rollout_cost_to_go(&v(&[1.0]), &v(&[0.0]), &[], &model, &cost, 0, 3).is_err());
    }

    #[test]
    fn rollout_matches_quadratic_form() {
        let model = SystemModel::new(
            DMatrix::from_row_slice(3, 3, &[0.9, 0.2, -0.4, 0.1, 1.3, 0.5, -0.7, 0.0, 0.6]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.3, -0.5, 0.2, 0.8]),
        )
        .unwrap();
        let cost = CostSpec::new(
            PdMatrix::from_diagonal(&[1.0, 2.0, 0.5]).unwrap(),
            PdMatrix::from_diagonal(&[0.7, 1.5]).unwrap(),
            PdMatrix::from_diagonal(&[3.0, 4.0, 5.0]).unwrap(),
        )
        .unwrap();
        let horizon = 5;
        let h = 1;
        let frozen: Vec<PolicyGain> = (0..horizon - 1 - h)
            .map(|i| {
                let k = DMatrix::from_fn(2, 3, |r, c| 0.1 * ((i + 2 * r + 3 * c) as f64).sin());
                PolicyGain::new(k, Stage::Index(h + 1 + i)).unwrap()
            })
            .collect();
        let mut p = cost.q_terminal().clone();
        for k in frozen.iter().rev() {
            p = lqr::surrogate_value_update(&p, k, &model, &cost).unwrap();
        }
        let x0 = v(&[0.4, -1.2, 0.9]);
        let u0 = v(&[0.3, -0.8]);
        let next = model.a() * &x0 + model.b() * &u0;
        let want = x0.dot(&(cost.q().matrix() * &x0)) + u0.dot(&(cost.r().matrix() * &u0)) + next.dot(&(p.matrix() * &next));
        let mut oracle = StageOracle::new(&model, &cost, &frozen, h, horizon).unwrap();
        let fast = oracle.cost_to_go(&x0, &u0).unwrap();
        let rec = oracle.rollout(&x0, &u0).unwrap();
        assert_relative_eq!(fast, want, max_relative = 1e-10);
        assert_relative_eq!(rec.total, want, max_relative = 1e-10);
        assert_relative_eq!(rec.total, rec.stage_costs.iter().sum::<f64>());
        assert_eq!(rec.inputs.len(), horizon - h);
        assert_eq!(rec.states.len(), horizon - h + 1);
    }

    #[test]
    fn forced_estimate() {
        let (model, cost) = scalar();
        let init = InitialStateModel::sphere(PdMatrix::scalar(1.0).unwrap());
        let oracle = StageOracle::new(&model, &cost, &[], 0, 1).unwrap();
        let mut est = OnePointEstimator::new(oracle, &init, ExplorationConfig::new(1.0).unwrap()).unwrap();
        let k = DMatrix::zeros(1, 1);
        let g = est.estimate_at(&k, &v(&[1.0]), &v(&[1.0])).unwrap();
        assert_relative_eq!(g[(0, 0)], -(2.0 + 5.33f64.powi(2) * 300.0), max_relative = 1e-12);
        assert_relative_eq!(g[(0, 0)], -8524.67, epsilon = 1e-9);
        assert_eq!(est.estimate_at(&k, &v(&[0.0]), &v(&[1.0])).unwrap()[(0, 0)], 0.0);
        assert_eq!(est.oracle_calls(), 2);
    }

    #[test]
    fn estimator_is_deterministic_and_counts_calls() {
        let (model, cost) = scalar();
        let init = InitialStateModel::sphere(PdMatrix::scalar(1.0).unwrap());
        let k = PolicyGain::zeros(1, 1, Stage::Index(0));
        let expl = ExplorationConfig::new(1.0).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = one_point_gradient_estimate(&k, 0, 1, &[], &model, &cost, &init, expl, &mut r1).unwrap();
        let b = one_point_gradient_estimate(&k, 0, 1, &[], &model, &cost, &init, expl, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1, 1);
        assert!(ExplorationConfig::new(0.0).is_err());
    }

    #[test]
    fn descend_matches_estimate() {
        let (model, cost) = scalar();
        let init = InitialStateModel::sphere(PdMatrix::scalar(1.0).unwrap());
        let expl = ExplorationConfig::new(0.5).unwrap();
        let mut e1 = OnePointEstimator::new(StageOracle::new(&model, &cost, &[], 0, 1).unwrap(), &init, expl).unwrap();
        let mut e2 = e1.clone();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let k0 = DMatrix::from_element(1, 1, 2.0);
        let mut g = DMatrix::zeros(1, 1);
        e1.estimate_into(&k0, &mut r1, &mut g);
        let mut k = k0.clone();
        e2.descend(&mut k, 0.01, &mut r2);
        assert_relative_eq!(k, k0 - g * 0.01, max_relative = 1e-14);
    }
}
