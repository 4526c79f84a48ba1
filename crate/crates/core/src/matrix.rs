//! Dense symmetric and positive-definite matrix utilities.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. Positive-definite
//! matrices are wrapped in [`PdMatrix`], which symmetrizes its input and
//! keeps the eigendecomposition around so that square roots, inverses and
//! spectral bounds are cheap afterwards.

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITERS: usize = 10_000;

/// Relative tolerance used for semidefinite-order comparisons.
pub const PSD_ORDER_TOL: f64 = 1e-8;

/// A symmetric positive-definite matrix with its eigendecomposition.
#[derive(Debug, Clone)]
pub struct PdMatrix {
    data: DMatrix<f64>,
    // ascending
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl PdMatrix {
    /// Symmetrizes `m` as `(m + mᵀ)/2` and checks `λ_min > n·ε·λ_max`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::dims(
                "PdMatrix::new",
                "non-empty square matrix",
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("matrix", "entries must be finite"));
        }
        let data = (&m + m.transpose()) * 0.5;
        let (eigenvalues, eigenvectors) = sorted_symmetric_eigen(&data, "PdMatrix::new")?;
        let n = data.nrows() as f64;
        let min = eigenvalues[0];
        let max = eigenvalues[eigenvalues.len() - 1];
        if !(min > 0.0 && min > n * f64::EPSILON * max) {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
                max_eigenvalue: max,
            });
        }
        Ok(Self {
            data,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity is positive definite")
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, value))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Spectral norm, which for a PD matrix is its largest eigenvalue.
    pub fn norm(&self) -> f64 {
        self.max_eigenvalue()
    }

    pub fn inverse(&self) -> PdMatrix {
        self.spectral_map(|l| 1.0 / l)
    }

    pub fn inverse_sqrt(&self) -> PdMatrix {
        self.spectral_map(|l| 1.0 / l.sqrt())
    }

    /// Multiplies by a positive scalar.
    pub fn scaled(&self, c: f64) -> Result<PdMatrix> {
        if !(c > 0.0) {
            return Err(Error::param("c", "scale must be positive"));
        }
        PdMatrix::new(&self.data * c)
    }

    /// `self + c·I`.
    pub fn shifted(&self, c: f64) -> Result<PdMatrix> {
        let n = self.dim();
        PdMatrix::new(&self.data + DMatrix::<f64>::identity(n, n) * c)
    }

    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> PdMatrix {
        let mapped = self.eigenvalues.map(&f);
        let v = &self.eigenvectors;
        let data = v * DMatrix::from_diagonal(&mapped) * v.transpose();
        let data = (&data + data.transpose()) * 0.5;
        let (eigenvalues, eigenvectors) = if mapped.iter().zip(mapped.iter().skip(1)).all(|(a, b)| a <= b) {
            (mapped, v.clone())
        } else {
            // f reversed the ordering (e.g. inversion)
            let n = mapped.len();
            let vals = DVector::from_fn(n, |i, _| mapped[n - 1 - i]);
            let vecs = DMatrix::from_fn(n, n, |r, c| v[(r, n - 1 - c)]);
            (vals, vecs)
        };
        PdMatrix {
            data,
            eigenvalues,
            eigenvectors,
        }
    }
}

impl PartialEq for PdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

fn sorted_symmetric_eigen(m: &DMatrix<f64>, op: &'static str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eig = m.clone().try_symmetric_eigen(EIGEN_EPS, EIGEN_MAX_ITERS).ok_or(Error::EigenFailure(op))?;
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((vals, vecs))
}

/// Eigenvalues (ascending) of a symmetric matrix. The input is symmetrized first.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if !m.is_square() {
        return Err(Error::dims("symmetric_eigenvalues", "square", format!("{}x{}", m.nrows(), m.ncols())));
    }
    let sym = (m + m.transpose()) * 0.5;
    Ok(sorted_symmetric_eigen(&sym, "symmetric_eigenvalues")?.0)
}

fn check_same_dim(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dims(op, a, b));
    }
    Ok(())
}

/// Riemannian distance `(Σ log² λ_i(U V⁻¹))^{1/2}`.
///
/// The spectrum of `U V⁻¹` is read off the symmetric similarity
/// `V^{-1/2} U V^{-1/2}`.
pub fn riemannian_distance(u: &PdMatrix, v: &PdMatrix) -> Result<f64> {
    check_same_dim("riemannian_distance", u.dim(), v.dim())?;
    let vis = v.inverse_sqrt();
    let w = vis.matrix() * u.matrix() * vis.matrix();
    let lambdas = symmetric_eigenvalues(&w)?;
    let mut acc = 0.0;
    for &l in lambdas.iter() {
        if !(l > 0.0) {
            return Err(Error::EigenFailure("riemannian_distance"));
        }
        let lg = l.ln();
        acc += lg * lg;
    }
    Ok(acc.sqrt())
}

/// Largest singular value.
pub fn spectral_norm(x: &DMatrix<f64>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    if x.nrows() == 1 || x.ncols() == 1 {
        return x.norm();
    }
    x.singular_values().max()
}

/// Smallest singular value (`σ_min`).
pub fn min_singular_value(x: &DMatrix<f64>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.singular_values().min()
}

/// `W`-induced norm `sup_z √(zᵀXᵀWXz / zᵀWz) = ‖W^{1/2} X W^{-1/2}‖`.
pub fn induced_norm(x: &DMatrix<f64>, w: &PdMatrix) -> Result<f64> {
    if !x.is_square() || x.nrows() != w.dim() {
        return Err(Error::dims(
            "induced_norm",
            format!("{n}x{n}", n = w.dim()),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    let s = pd_sqrt(w);
    let si = w.inverse_sqrt();
    Ok(spectral_norm(&(s.matrix() * x * si.matrix())))
}

/// `max |λ_i(X)|` using a general (complex-capable) eigensolve.
pub fn spectral_radius(x: &DMatrix<f64>) -> Result<f64> {
    if !x.is_square() {
        return Err(Error::dims("spectral_radius", "square", format!("{}x{}", x.nrows(), x.ncols())));
    }
    if x.nrows() == 1 {
        return Ok(x[(0, 0)].abs());
    }
    let schur = Schur::try_new(x.clone(), EIGEN_EPS, EIGEN_MAX_ITERS).ok_or(Error::EigenFailure("spectral_radius"))?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// The unique positive-definite square root.
pub fn pd_sqrt(w: &PdMatrix) -> PdMatrix {
    w.spectral_map(f64::sqrt)
}

/// `λ_max / λ_min`.
pub fn condition_number(w: &PdMatrix) -> f64 {
    w.max_eigenvalue() / w.min_eigenvalue()
}

/// Semidefinite order `X ⪰ Y`, accepted when `λ_min(X − Y) ≥ −1e-8·‖X‖`.
pub fn psd_geq(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<bool> {
    if x.shape() != y.shape() {
        return Err(Error::dims("psd_geq", format!("{:?}", x.shape()), format!("{:?}", y.shape())));
    }
    let diff = x - y;
    let min = symmetric_eigenvalues(&diff)?[0];
    Ok(min >= -PSD_ORDER_TOL * spectral_norm(x))
}
