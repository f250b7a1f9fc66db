//! Small dense linear-algebra helpers shared by the rest of the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Vectorization is column-major,
//! matching nalgebra's storage, so `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{MjsError, Result};

/// Dimension at or below which [`spectral_radius`] uses a full Schur
/// decomposition; larger matrices go through power iteration.
pub const DENSE_EIGEN_THRESHOLD: usize = 400;

/// Relative tolerance of the power-iteration path.
pub const POWER_TOL: f64 = 1e-8;

/// Iteration cap of the power-iteration path.
pub const POWER_MAX_ITER: usize = 100_000;

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`] for an `n×n` matrix.
pub fn unvec(v: &[f64], n: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), n * n);
    DMatrix::from_column_slice(n, n, v)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest singular value; zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

/// Spectral radius (largest eigenvalue modulus) of a square matrix.
///
/// Matrices up to [`DENSE_EIGEN_THRESHOLD`] use a real Schur decomposition.
/// Larger ones use power iteration with a two-step norm-ratio estimate,
/// which converges whenever the dominant eigenvalues are real (the case for
/// positive operators such as the augmented second-moment matrix).
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(MjsError::ShapeMismatch(format!(
            "spectral radius of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(MjsError::InvalidInput("non-finite matrix entry".into()));
    }
    let dim = m.nrows();
    if dim == 0 {
        return Ok(0.0);
    }
    if dim <= DENSE_EIGEN_THRESHOLD {
        dense_spectral_radius(m)
    } else {
        let start = DVector::from_fn(dim, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
        power_iteration_radius(|v| m * v, start, POWER_TOL, POWER_MAX_ITER)
    }
}

fn dense_spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    let dim = m.nrows();
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000 * dim.max(1)).ok_or(
        MjsError::NoConvergence {
            what: "Schur decomposition",
            iterations: 10_000 * dim,
            residual: f64::NAN,
        },
    )?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Power iteration for the spectral radius of a linear operator.
///
/// Each step normalizes the iterate; the estimate is the geometric mean of
/// two consecutive growth factors, which is insensitive to a `±λ` pair.
/// Stops once the estimate changes by less than `tol` (relative) for three
/// consecutive steps.
pub fn power_iteration_radius<F>(
    mut apply: F,
    start: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<f64>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let norm0 = start.norm();
    if norm0 == 0.0 {
        return Err(MjsError::InvalidInput("zero start vector".into()));
    }
    let mut v = start / norm0;
    let mut prev_growth: Option<f64> = None;
    let mut prev_est = f64::NAN;
    let mut stable = 0;
    let mut last_change = f64::INFINITY;
    for _ in 0..max_iter {
        let w = apply(&v);
        let growth = w.norm();
        if growth == 0.0 {
            return Ok(0.0);
        }
        if !growth.is_finite() {
            return Err(MjsError::InvalidInput("non-finite iterate".into()));
        }
        v = w / growth;
        if let Some(g) = prev_growth {
            let est = (g * growth).sqrt();
            last_change = (est - prev_est).abs();
            if last_change <= tol * est {
                stable += 1;
                if stable >= 3 {
                    return Ok(est);
                }
            } else {
                stable = 0;
            }
            prev_est = est;
        }
        prev_growth = Some(growth);
    }
    Err(MjsError::NoConvergence {
        what: "power iteration",
        iterations: max_iter,
        residual: last_change,
    })
}

/// Solves `a x = b` by LU, failing on a singular system.
pub fn lu_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}
