//! Model-based LQR machinery.
//!
//! These routines need the system matrices, so the model-free solver never
//! calls them on its own path. They are the ground truth the solver and the
//! property suites are checked against: the Riccati operator, finite- and
//! infinite-horizon Riccati solutions, and closed forms for the per-stage
//! surrogate cost and its gradient.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{self, PdMatrix};

/// Smallest LU pivot, relative to `‖A‖`, for `A` to count as invertible.
pub const A_INVERTIBLE_PIVOT_TOL: f64 = 1e-10;

/// Linear dynamics `x_{t+1} = A x_t + B u_t`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    a_invertible: bool,
}

impl SystemModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dims(
                "SystemModel::new",
                "non-empty square A",
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dims(
                "SystemModel::new",
                format!("B with {n} rows and m >= 1 columns"),
                format!("{}x{}", b.nrows(), b.ncols()),
            ));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::param("model", "A and B must be finite"));
        }
        let a_invertible = is_invertible(&a);
        Ok(Self { a, b, a_invertible })
    }

    pub fn scalar(a: f64, b: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Whether `A` passed the LU pivot test at construction.
    pub fn a_invertible(&self) -> bool {
        self.a_invertible
    }
}

fn is_invertible(a: &DMatrix<f64>) -> bool {
    let scale = matrix::spectral_norm(a);
    if scale == 0.0 {
        return false;
    }
    let u = a.clone().lu().u();
    let min_pivot = u.diagonal().iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
    min_pivot >= A_INVERTIBLE_PIVOT_TOL * scale
}

/// Quadratic cost weights: stage `Q`, input `R`, terminal `Q_N`.
#[derive(Debug, Clone)]
pub struct CostSpec {
    q: PdMatrix,
    r: PdMatrix,
    q_terminal: PdMatrix,
}

impl CostSpec {
    pub fn new(q: PdMatrix, r: PdMatrix, q_terminal: PdMatrix) -> Result<Self> {
        if q.dim() != q_terminal.dim() {
            return Err(Error::dims("CostSpec::new", format!("Q_N {n}x{n}", n = q.dim()), q_terminal.dim()));
        }
        Ok(Self { q, r, q_terminal })
    }

    pub fn q(&self) -> &PdMatrix {
        &self.q
    }

    pub fn r(&self) -> &PdMatrix {
        &self.r
    }

    pub fn q_terminal(&self) -> &PdMatrix {
        &self.q_terminal
    }

    pub fn with_terminal(&self, q_terminal: PdMatrix) -> Result<Self> {
        Self::new(self.q.clone(), self.r.clone(), q_terminal)
    }

    /// Checks that the weights fit `model`.
    pub fn check(&self, model: &SystemModel) -> Result<()> {
        if self.q.dim() != model.state_dim() {
            return Err(Error::dims("CostSpec", format!("Q {n}x{n}", n = model.state_dim()), self.q.dim()));
        }
        if self.r.dim() != model.input_dim() {
            return Err(Error::dims("CostSpec", format!("R {m}x{m}", m = model.input_dim()), self.r.dim()));
        }
        Ok(())
    }

    /// `Q_N ⪰ P*` in the tolerant semidefinite order.
    pub fn terminal_dominates(&self, p_star: &PdMatrix) -> Result<bool> {
        matrix::psd_geq(self.q_terminal.matrix(), p_star.matrix())
    }
}

/// Which time step a gain belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Index(usize),
    Stationary,
}

/// An `m×n` state-feedback gain, `u = −K x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGain {
    k: DMatrix<f64>,
    stage: Stage,
}

impl PolicyGain {
    pub fn new(k: DMatrix<f64>, stage: Stage) -> Result<Self> {
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("K", "gain entries must be finite"));
        }
        Ok(Self { k, stage })
    }

    pub fn zeros(m: usize, n: usize, stage: Stage) -> Self {
        Self {
            k: DMatrix::zeros(m, n),
            stage,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.k
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn at_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }
}

/// Stabilizing solution of the algebraic Riccati equation.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p_star: PdMatrix,
    pub k_star: PolicyGain,
    pub iterations: usize,
    /// `‖P − 𝓡(P)‖_F / ‖P‖_F` at return.
    pub residual: f64,
}

/// Backward Riccati recursion from `P_N = Q_N`.
#[derive(Debug, Clone)]
pub struct ValueSequence {
    // p[t] for t = 0..=N
    p: Vec<PdMatrix>,
    // k[t] for t = 0..N
    k: Vec<PolicyGain>,
}

impl ValueSequence {
    pub fn horizon(&self) -> usize {
        self.k.len()
    }

    pub fn value(&self, t: usize) -> &PdMatrix {
        &self.p[t]
    }

    pub fn gain(&self, t: usize) -> &PolicyGain {
        &self.k[t]
    }

    pub fn values(&self) -> &[PdMatrix] {
        &self.p
    }

    pub fn gains(&self) -> &[PolicyGain] {
        &self.k
    }

    /// Checks `P_N ⪰ P_{N−1} ⪰ … ⪰ P_0 ⪰ P*`.
    pub fn is_monotone_above(&self, p_star: &PdMatrix) -> Result<bool> {
        for w in self.p.windows(2) {
            if !matrix::psd_geq(w[1].matrix(), w[0].matrix())? {
                return Ok(false);
            }
        }
        matrix::psd_geq(self.p[0].matrix(), p_star.matrix())
    }
}

fn check_value_dims(op: &'static str, p: &PdMatrix, model: &SystemModel, cost: &CostSpec) -> Result<()> {
    cost.check(model)?;
    if p.dim() != model.state_dim() {
        return Err(Error::dims(op, model.state_dim(), p.dim()));
    }
    Ok(())
}

fn check_gain_dims(op: &'static str, k: &PolicyGain, model: &SystemModel) -> Result<()> {
    let (m, n) = (model.input_dim(), model.state_dim());
    if k.matrix().shape() != (m, n) {
        return Err(Error::dims(op, format!("{m}x{n}"), format!("{:?}", k.matrix().shape())));
    }
    Ok(())
}

/// `(R + BᵀPB)⁻¹ · rhs` through a Cholesky factorization.
fn solve_input_hessian(p: &DMatrix<f64>, model: &SystemModel, cost: &CostSpec, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = model.b();
    let s = cost.r().matrix() + b.transpose() * p * b;
    let chol = s.cholesky().ok_or(Error::Singular("R + BᵀPB"))?;
    Ok(chol.solve(rhs))
}

/// One backward Riccati step `𝓡(P) = Q + Aᵀ(P − PB(R + BᵀPB)⁻¹BᵀP)A`.
pub fn riccati_operator(p: &PdMatrix, model: &SystemModel, cost: &CostSpec) -> Result<PdMatrix> {
    check_value_dims("riccati_operator", p, model, cost)?;
    let (a, b, pm) = (model.a(), model.b(), p.matrix());
    let bt_p = b.transpose() * pm;
    let x = solve_input_hessian(pm, model, cost, &bt_p)?;
    let inner = pm - pm * b * x;
    PdMatrix::new(cost.q().matrix() + a.transpose() * inner * a)
}

/// `(R + BᵀPB)⁻¹BᵀPA`, the minimizer of the one-step surrogate.
pub fn gain_from_value(p: &PdMatrix, model: &SystemModel, cost: &CostSpec) -> Result<PolicyGain> {
    check_value_dims("gain_from_value", p, model, cost)?;
    let rhs = model.b().transpose() * p.matrix() * model.a();
    PolicyGain::new(solve_input_hessian(p.matrix(), model, cost, &rhs)?, Stage::Stationary)
}

/// Solves the finite-horizon recursion of length `n`.
pub fn solve_rde(model: &SystemModel, cost: &CostSpec, n: usize) -> Result<ValueSequence> {
    if n == 0 {
        return Err(Error::param("N", "horizon must be at least 1"));
    }
    cost.check(model)?;
    let mut p = vec![cost.q_terminal().clone(); n + 1];
    let mut k = Vec::with_capacity(n);
    for t in (0..n).rev() {
        k.push(gain_from_value(&p[t + 1], model, cost)?.at_stage(Stage::Index(t)));
        p[t] = riccati_operator(&p[t + 1], model, cost)?;
    }
    k.reverse();
    Ok(ValueSequence { p, k })
}

#[derive(Debug, Clone, Copy)]
pub struct AreOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for AreOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 100_000,
        }
    }
}

/// Fixed-point iteration `P ← 𝓡(P)` started at `Q_N`.
///
/// Monotone when `Q_N ⪰ P*`; converges from any PD start when `(A, B)` is
/// stabilizable. Non-stabilizable systems show up as [`Error::NonConvergent`].
pub fn solve_are(model: &SystemModel, cost: &CostSpec, opts: AreOptions) -> Result<RiccatiSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    cost.check(model)?;
    let mut p = cost.q_terminal().clone();
    let mut residual = f64::INFINITY;
    for it in 0..opts.max_iters {
        let next = riccati_operator(&p, model, cost)?;
        residual = (next.matrix() - p.matrix()).norm() / p.matrix().norm();
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            let k_star = gain_from_value(&p, model, cost)?;
            let rho = matrix::spectral_radius(&closed_loop(model, &k_star)?)?;
            if rho >= 1.0 {
                return Err(Error::UnstableClosedLoop { spectral_radius: rho });
            }
            return Ok(RiccatiSolution {
                p_star: p,
                k_star,
                iterations: it + 1,
                residual,
            });
        }
        p = next;
    }
    Err(Error::NonConvergent {
        iterations: opts.max_iters,
        residual,
    })
}

/// `A − BK`.
pub fn closed_loop(model: &SystemModel, k: &PolicyGain) -> Result<DMatrix<f64>> {
    check_gain_dims("closed_loop", k, model)?;
    Ok(model.a() - model.b() * k.matrix())
}

fn surrogate_value_matrix(p_next: &PdMatrix, k: &PolicyGain, model: &SystemModel, cost: &CostSpec) -> Result<DMatrix<f64>> {
    check_value_dims("surrogate_value_update", p_next, model, cost)?;
    let acl = closed_loop(model, k)?;
    let km = k.matrix();
    Ok(acl.transpose() * p_next.matrix() * &acl + km.transpose() * cost.r().matrix() * km + cost.q().matrix())
}

/// `(A−BK)ᵀ P_next (A−BK) + KᵀRK + Q`: the value of applying `K` for one
/// step before following the policies that produced `P_next`.
pub fn surrogate_value_update(p_next: &PdMatrix, k: &PolicyGain, model: &SystemModel, cost: &CostSpec) -> Result<PdMatrix> {
    PdMatrix::new(surrogate_value_matrix(p_next, k, model, cost)?)
}

/// Expected surrogate cost `tr((Q + KᵀRK + (A−BK)ᵀP_next(A−BK)) Σ0)`.
pub fn exact_surrogate_cost(k: &PolicyGain, p_next: &PdMatrix, sigma0: &PdMatrix, model: &SystemModel, cost: &CostSpec) -> Result<f64> {
    if sigma0.dim() != model.state_dim() {
        return Err(Error::dims("exact_surrogate_cost", model.state_dim(), sigma0.dim()));
    }
    let m = surrogate_value_matrix(p_next, k, model, cost)?;
    Ok((m * sigma0.matrix()).trace())
}

/// `2((R + BᵀP_nextB)K − BᵀP_nextA)Σ0`.
pub fn exact_surrogate_gradient(k: &PolicyGain, p_next: &PdMatrix, sigma0: &PdMatrix, model: &SystemModel, cost: &CostSpec) -> Result<DMatrix<f64>> {
    check_value_dims("exact_surrogate_gradient", p_next, model, cost)?;
    check_gain_dims("exact_surrogate_gradient", k, model)?;
    if sigma0.dim() != model.state_dim() {
        return Err(Error::dims("exact_surrogate_gradient", model.state_dim(), sigma0.dim()));
    }
    let (a, b, p) = (model.a(), model.b(), p_next.matrix());
    let bt_p = b.transpose() * p;
    let hess = cost.r().matrix() + &bt_p * b;
    Ok((hess * k.matrix() - bt_p * a) * sigma0.matrix() * 2.0)
}

/// Horizon that makes the exact receding-horizon gain `ε/2`-accurate and
/// leaves the other half of the budget for stage errors:
///
/// `N = ⌈ ½·log(2‖Q_N−P*‖_*·κ_{P*}·‖A−BK*‖·‖B‖ / (ε·λ_min(R))) / log(1/‖A−BK*‖_*) + 1 ⌉`
///
/// Dropping the factor 2 and the trailing `+1` gives the smaller horizon
/// after which `K*_0` alone is within `ε` of `K*`.
pub fn horizon_for_accuracy(solution: &RiccatiSolution, model: &SystemModel, cost: &CostSpec, eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::param("eps", "must be positive"));
    }
    let p_star = &solution.p_star;
    if !cost.terminal_dominates(p_star)? {
        return Err(Error::TerminalNotDominant);
    }
    let acl = closed_loop(model, &solution.k_star)?;
    let rate = matrix::induced_norm(&acl, p_star)?;
    if rate >= 1.0 {
        return Err(Error::UnstableClosedLoop { spectral_radius: rate });
    }
    let gap = matrix::induced_norm(&(cost.q_terminal().matrix() - p_star.matrix()), p_star)?;
    let numer = 2.0 * gap * matrix::condition_number(p_star) * matrix::spectral_norm(&acl) * matrix::spectral_norm(model.b());
    let ratio = numer / (eps * cost.r().min_eigenvalue());
    if rate == 0.0 || !(ratio > 0.0) {
        return Ok(1);
    }
    let n = 0.5 * ratio.ln() / (1.0 / rate).ln() + 1.0;
    Ok((n.ceil().max(1.0)) as usize)
}

/// `⌈½·ln(1/ε)⌉`, at least 1. The short horizon used for the scalar sweep.
pub fn horizon_log_rule(eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::param("eps", "must be positive"));
    }
    Ok(((0.5 * (1.0 / eps).ln()).ceil().max(1.0)) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub stabilizing: bool,
    pub spectral_radius: f64,
    /// `‖A − BK‖_{P*}`; below 1 certifies stability.
    pub margin: f64,
}

pub fn check_stabilizing(model: &SystemModel, k: &PolicyGain, p_star: &PdMatrix) -> Result<StabilityReport> {
    let acl = closed_loop(model, k)?;
    let spectral_radius = matrix::spectral_radius(&acl)?;
    let margin = matrix::induced_norm(&acl, p_star)?;
    Ok(StabilityReport {
        stabilizing: spectral_radius < 1.0,
        spectral_radius,
        margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar() -> (SystemModel, CostSpec) {
        let model = SystemModel::scalar(5.0, 0.33).unwrap();
        let cost = CostSpec::new(
            PdMatrix::scalar(1.0).unwrap(),
            PdMatrix::scalar(1.0).unwrap(),
            PdMatrix::scalar(300.0).unwrap(),
        )
        .unwrap();
        (model, cost)
    }

    fn s(x: f64) -> PdMatrix {
        PdMatrix::scalar(x).unwrap()
    }

    fn k1(x: f64) -> PolicyGain {
        PolicyGain::new(DMatrix::from_element(1, 1, x), Stage::Stationary).unwrap()
    }

    fn scalar_ricc(p: f64) -> f64 {
        1.0 + 25.0 * (p - p * p * 0.1089 / (1.0 + 0.1089 * p))
    }

    #[test]
    fn model_validation() {
        assert!(SystemModel::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1)).is_err());
        assert!(SystemModel::new(DMatrix::identity(2, 2), DMatrix::zeros(3, 1)).is_err());
        assert!(SystemModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 0)).is_err());
        assert!(SystemModel::scalar(5.0, 0.33).unwrap().a_invertible());
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(!SystemModel::new(singular, DMatrix::zeros(2, 1)).unwrap().a_invertible());
        assert!(!SystemModel::scalar(0.0, 1.0).unwrap().a_invertible());
    }

    #[test]
    fn riccati_operator_examples() {
        let (model, cost) = scalar();
        let p = riccati_operator(&s(300.0), &model, &cost).unwrap();
        assert_relative_eq!(p.matrix()[(0, 0)], scalar_ricc(300.0), max_relative = 1e-12);
        assert_relative_eq!(p.matrix()[(0, 0)], 223.750_222_75, epsilon = 1e-6);

        let fixed = riccati_operator(&s(221.4271), &model, &cost).unwrap();
        assert!((fixed.matrix()[(0, 0)] - 221.4271).abs() < 1e-3);

        let uncontrolled = SystemModel::new(DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 2.0]), DMatrix::zeros(2, 1)).unwrap();
        let cost2 = CostSpec::new(PdMatrix::identity(2), PdMatrix::identity(1), PdMatrix::identity(2)).unwrap();
        let p = PdMatrix::from_diagonal(&[2.0, 3.0]).unwrap();
        let got = riccati_operator(&p, &uncontrolled, &cost2).unwrap();
        let a = uncontrolled.a();
        let want = DMatrix::<f64>::identity(2, 2) + a.transpose() * p.matrix() * a;
        assert_relative_eq!(got.matrix(), &want, epsilon = 1e-12);
    }

    #[test]
    fn gain_examples() {
        let (model, cost) = scalar();
        let k = gain_from_value(&s(221.4271), &model, &cost).unwrap();
        assert!((k.matrix()[(0, 0)] - 14.5482).abs() < 1e-3);
        let k = gain_from_value(&s(300.0), &model, &cost).unwrap();
        assert_relative_eq!(k.matrix()[(0, 0)], 0.33 * 300.0 * 5.0 / (1.0 + 0.1089 * 300.0), max_relative = 1e-12);
        let zero_b = SystemModel::scalar(5.0, 0.0).unwrap();
        assert_eq!(gain_from_value(&s(300.0), &zero_b, &cost).unwrap().matrix()[(0, 0)], 0.0);
    }

    #[test]
    fn rde_examples() {
        let (model, cost) = scalar();
        let seq = solve_rde(&model, &cost, 1).unwrap();
        assert_relative_eq!(seq.value(0).matrix()[(0, 0)], scalar_ricc(300.0), max_relative = 1e-12);
        assert_relative_eq!(seq.gain(0).matrix()[(0, 0)], 14.701_514_701_5, epsilon = 1e-8);
        assert_eq!(seq.value(1).matrix()[(0, 0)], 300.0);

        let seq = solve_rde(&model, &cost, 8).unwrap();
        let are = solve_are(&model, &cost, AreOptions::default()).unwrap();
        assert!(seq.is_monotone_above(&are.p_star).unwrap());
        assert_eq!(seq.gain(3).stage(), Stage::Index(3));

        let still = SystemModel::new(DMatrix::zeros(2, 2), DMatrix::from_element(2, 1, 1.0)).unwrap();
        let q = PdMatrix::from_diagonal(&[1.0, 2.0]).unwrap();
        let cost2 = CostSpec::new(q.clone(), PdMatrix::identity(1), PdMatrix::identity(2)).unwrap();
        let seq = solve_rde(&still, &cost2, 4).unwrap();
        for t in 0..4 {
            assert_eq!(seq.gain(t).matrix().norm(), 0.0);
            assert_relative_eq!(seq.value(t).matrix(), q.matrix(), epsilon = 1e-14);
        }
        assert!(solve_rde(&model, &cost, 0).is_err());
    }

    #[test]
    fn are_examples() {
        let (model, cost) = scalar();
        let sol = solve_are(&model, &cost, AreOptions::default()).unwrap();
        assert!((sol.p_star.matrix()[(0, 0)] - 221.4271).abs() < 1e-3);
        assert!((sol.k_star.matrix()[(0, 0)] - 14.5482).abs() < 1e-3);
        assert!(sol.residual <= 1e-10);

        let stable = SystemModel::scalar(0.5, 0.0).unwrap();
        let cost1 = CostSpec::new(s(1.0), s(1.0), s(1.0)).unwrap();
        let sol = solve_are(&stable, &cost1, AreOptions::default()).unwrap();
        assert_relative_eq!(sol.p_star.matrix()[(0, 0)], 4.0 / 3.0, max_relative = 1e-9);

        let still = SystemModel::new(DMatrix::zeros(2, 2), DMatrix::from_row_slice(2, 1, &[0.3, -1.0])).unwrap();
        let cost2 = CostSpec::new(PdMatrix::identity(2), PdMatrix::identity(1), PdMatrix::identity(2)).unwrap();
        let sol = solve_are(&still, &cost2, AreOptions::default()).unwrap();
        assert_relative_eq!(sol.p_star.matrix(), &DMatrix::identity(2, 2), epsilon = 1e-12);
        assert!(sol.k_star.matrix().norm() < 1e-12);
    }

    #[test]
    fn are_detects_unstabilizable() {
        let model = SystemModel::scalar(2.0, 0.0).unwrap();
        let cost = CostSpec::new(s(1.0), s(1.0), s(1.0)).unwrap();
        let err = solve_are(&model, &cost, AreOptions { tol: 1e-10, max_iters: 200 }).unwrap_err();
        assert!(matches!(err, Error::NonConvergent { .. }), "{err}");
    }

    #[test]
    fn closed_loop_examples() {
        let (model, _) = scalar();
        assert_eq!(closed_loop(&model, &k1(0.0)).unwrap()[(0, 0)], 5.0);
        assert_relative_eq!(closed_loop(&model, &k1(14.5482)).unwrap()[(0, 0)], 0.199094, epsilon = 1e-6);
        let zero_b = SystemModel::scalar(5.0, 0.0).unwrap();
        assert_eq!(closed_loop(&zero_b, &k1(123.0)).unwrap()[(0, 0)], 5.0);
        assert!(closed_loop(&model, &PolicyGain::zeros(1, 2, Stage::Stationary)).is_err());
    }

    #[test]
    fn surrogate_update_examples() {
        let (model, cost) = scalar();
        let p = surrogate_value_update(&s(300.0), &k1(0.0), &model, &cost).unwrap();
        assert_relative_eq!(p.matrix()[(0, 0)], 25.0 * 300.0 + 1.0, max_relative = 1e-14);

        let k = gain_from_value(&s(300.0), &model, &cost).unwrap();
        let via_gain = surrogate_value_update(&s(300.0), &k, &model, &cost).unwrap();
        let via_op = riccati_operator(&s(300.0), &model, &cost).unwrap();
        assert_relative_eq!(via_gain.matrix(), via_op.matrix(), max_relative = 1e-12);
        // direct scalar evaluation at the rounded gain
        let kv: f64 = 14.702;
        let direct = (5.0 - 0.33 * kv).powi(2) * 300.0 + kv * kv + 1.0;
        let got = surrogate_value_update(&s(300.0), &k1(kv), &model, &cost).unwrap();
        assert_relative_eq!(got.matrix()[(0, 0)], direct, max_relative = 1e-12);
    }

    #[test]
    fn surrogate_cost_and_gradient_examples() {
        let (model, cost) = scalar();
        let one = s(1.0);
        assert_relative_eq!(
            exact_surrogate_cost(&k1(0.0), &s(300.0), &one, &model, &cost).unwrap(),
            7501.0,
            max_relative = 1e-14
        );
        let g = exact_surrogate_gradient(&k1(0.0), &s(300.0), &one, &model, &cost).unwrap();
        assert_relative_eq!(g[(0, 0)], -990.0, max_relative = 1e-13);
        let kstar = gain_from_value(&s(300.0), &model, &cost).unwrap();
        let g = exact_surrogate_gradient(&kstar, &s(300.0), &one, &model, &cost).unwrap();
        assert!(g[(0, 0)].abs() < 1e-10);

        let zero_b = SystemModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, -0.3]), DMatrix::zeros(2, 1)).unwrap();
        let cost2 = CostSpec::new(PdMatrix::from_diagonal(&[1.0, 2.0]).unwrap(), s(1.0), PdMatrix::identity(2)).unwrap();
        let pn = PdMatrix::from_diagonal(&[3.0, 5.0]).unwrap();
        let got = exact_surrogate_cost(&PolicyGain::zeros(1, 2, Stage::Stationary), &pn, &PdMatrix::identity(2), &zero_b, &cost2).unwrap();
        let a = zero_b.a();
        let want = (cost2.q().matrix() + a.transpose() * pn.matrix() * a).trace();
        assert_relative_eq!(got, want, max_relative = 1e-14);
    }

    #[test]
    fn horizon_examples() {
        let (model, cost) = scalar();
        let sol = solve_are(&model, &cost, AreOptions::default()).unwrap();
        assert_eq!(horizon_for_accuracy(&sol, &model, &cost, 0.1).unwrap(), 3);
        let rate: f64 = 0.199_096_768;
        let bump = ((0.5 * 2f64.ln() / (1.0 / rate).ln()).ceil() + 1.0) as usize;
        for eps in [1.0, 0.1, 1e-3, 1e-6] {
            let n1 = horizon_for_accuracy(&sol, &model, &cost, eps).unwrap();
            let n2 = horizon_for_accuracy(&sol, &model, &cost, eps / 2.0).unwrap();
            assert!(n2 >= n1 && n2 - n1 <= bump);
        }
        assert_eq!(horizon_log_rule(1e-6).unwrap(), 7);
        assert_eq!(horizon_log_rule(10f64.powf(-0.5)).unwrap(), 1);

        let low = cost.with_terminal(s(100.0)).unwrap();
        assert!(matches!(horizon_for_accuracy(&sol, &model, &low, 0.1), Err(Error::TerminalNotDominant)));
        assert!(horizon_for_accuracy(&sol, &model, &cost, 0.0).is_err());
    }

    #[test]
    fn stabilizing_examples() {
        let (model, cost) = scalar();
        let sol = solve_are(&model, &cost, AreOptions::default()).unwrap();
        let rep = check_stabilizing(&model, &sol.k_star, &sol.p_star).unwrap();
        assert!(rep.stabilizing);
        assert_relative_eq!(rep.margin, 0.199_096_768, epsilon = 1e-6);
        let rep = check_stabilizing(&model, &k1(0.0), &sol.p_star).unwrap();
        assert!(!rep.stabilizing);
        assert_relative_eq!(rep.spectral_radius, 5.0);
        let stable = SystemModel::scalar(0.9, 0.0).unwrap();
        assert!(check_stabilizing(&stable, &k1(-40.0), &sol.p_star).unwrap().stabilizing);
        // the stable set of the scalar instance is 12.12 < K < 18.18
        assert!(check_stabilizing(&model, &k1(12.2), &sol.p_star).unwrap().stabilizing);
        assert!(!check_stabilizing(&model, &k1(12.1), &sol.p_star).unwrap().stabilizing);
        assert!(!check_stabilizing(&model, &k1(18.19), &sol.p_star).unwrap().stabilizing);
    }
}
