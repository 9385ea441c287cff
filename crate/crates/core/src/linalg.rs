//! Small dense-matrix helpers shared across the crate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Largest absolute entry of a matrix; 0 for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Frobenius norm.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// True when every entry is finite.
pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// (m + mᵀ)/2 for square matrices.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(m.nrows(), m.ncols(), "symmetrize needs a square matrix");
    (m + m.transpose()) * 0.5
}

/// Spectral norm (largest singular value) via power iteration on aᵀa.
///
/// The start vector is drawn from a fixed-seed generator so the estimate is
/// deterministic. Iterates until the estimate changes by less than `tol`
/// relative, with a hard iteration cap; the result approaches the true value
/// from below, so callers that use it as a Lipschitz constant should allow
/// slack of order `tol`.
pub fn spectral_norm(a: &DMatrix<f64>, tol: f64) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f17);
    let mut v = DVector::<f64>::from_fn(a.ncols(), |_, _| rng.gen::<f64>() - 0.5);
    let nv = v.norm();
    if nv == 0.0 {
        return 0.0;
    }
    v /= nv;

    let mut sigma = 0.0f64;
    for _ in 0..100_000 {
        let w = a * &v;
        let next = (a.transpose() * &w).into_owned();
        let norm_next = next.norm();
        if norm_next == 0.0 {
            return 0.0;
        }
        let sigma_new = w.norm();
        v = next / norm_next;
        if (sigma_new - sigma).abs() <= tol * sigma_new.max(1e-300) {
            return sigma_new;
        }
        sigma = sigma_new;
    }
    sigma
}

/// Solves `x · lhs = rhs` for `x` where `lhs` is symmetric positive definite,
/// via a Cholesky factorization (no explicit inverse).
///
/// `lhs` is d×d, `rhs` is m×d, and the returned `x` is m×d.
pub fn solve_spd_right(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if lhs.nrows() != lhs.ncols() || rhs.ncols() != lhs.nrows() {
        return Err(CoreError::ShapeMismatch {
            context: "solve_spd_right".into(),
            expected: format!("lhs d×d with rhs m×d, d={}", lhs.nrows()),
            actual: format!(
                "lhs {}×{}, rhs {}×{}",
                lhs.nrows(),
                lhs.ncols(),
                rhs.nrows(),
                rhs.ncols()
            ),
        });
    }
    let chol = lhs.clone().cholesky().ok_or_else(|| {
        CoreError::Numerical("Cholesky factorization failed (matrix not positive definite)".into())
    })?;
    // lhs is symmetric, so x·lhs = rhs  ⇔  lhs·xᵀ = rhsᵀ.
    let xt = chol.solve(&rhs.transpose());
    Ok(xt.transpose())
}

/// Composite-trapezoid integral of a matrix-valued function over [0, 1].
///
/// `nodes` must be at least 2; the grid is t_k = k/(nodes-1).
pub fn trapezoid_matrix<F>(f: F, nodes: usize) -> DMatrix<f64>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    assert!(nodes >= 2, "trapezoid rule needs at least 2 nodes");
    let h = 1.0 / (nodes - 1) as f64;
    let mut acc = f(0.0) * 0.5;
    for k in 1..nodes - 1 {
        acc += f(k as f64 * h);
    }
    acc += f(1.0) * 0.5;
    acc * h
}

/// Per-column Euclidean norms.
pub fn column_norms(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|j| m.column(j).norm()).collect()
}

/// Cosine similarity between matching columns of two matrices.
///
/// Identical columns (including all-zero pairs) score exactly 1; a zero
/// column against a nonzero one scores 0.
pub fn column_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(a.shape(), b.shape(), "column_cosines shape mismatch");
    (0..a.ncols())
        .map(|j| {
            let ca = a.column(j);
            let cb = b.column(j);
            if ca == cb {
                return 1.0;
            }
            let na = ca.norm();
            let nb = cb.norm();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                ca.dot(&cb) / (na * nb)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_norm_matches_known_values() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 2.0]);
        assert_relative_eq!(spectral_norm(&m, 1e-13), 3.0, max_relative = 1e-10);

        // Rank-one matrix u vᵀ has spectral norm ‖u‖‖v‖.
        let u = DVector::from_row_slice(&[1.0, 2.0, 2.0]);
        let v = DVector::from_row_slice(&[3.0, 4.0]);
        let m = &u * v.transpose();
        assert_relative_eq!(spectral_norm(&m, 1e-13), 15.0, max_relative = 1e-10);
    }

    #[test]
    fn spd_solve_recovers_known_solution() {
        let lhs = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x_true = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 0.0, -1.0, 4.0]);
        let rhs = &x_true * &lhs;
        let x = solve_spd_right(&lhs, &rhs).unwrap();
        assert!(max_abs(&(&x - &x_true)) < 1e-12);
    }

    #[test]
    fn trapezoid_is_exact_for_linear_integrands() {
        // ∫₀¹ (2 + 2t) dt = 3, the averaged slope of h ↦ h² along 1 → 2.
        let a = trapezoid_matrix(|t| DMatrix::from_element(1, 1, 2.0 * (1.0 + t)), 33);
        assert!((a[(0, 0)] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn trapezoid_converges_quadratically() {
        // ∫₀¹ t² dt = 1/3 with error O(h²).
        let f = |t: f64| DMatrix::from_element(1, 1, t * t);
        let e1 = (trapezoid_matrix(f, 9)[(0, 0)] - 1.0 / 3.0).abs();
        let e2 = (trapezoid_matrix(f, 17)[(0, 0)] - 1.0 / 3.0).abs();
        assert!(e2 < e1 / 3.5, "expected ~4x error reduction, got {e1} -> {e2}");
    }

    #[test]
    fn cosine_conventions() {
        let a = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let cos = column_cosines(&a, &b);
        assert_eq!(cos, vec![1.0, 1.0]);

        let c = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
        let d = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(column_cosines(&c, &d), vec![0.0]);
    }
}
