//! Independent minimizers used to certify the closed-form updates.
//!
//! These deliberately avoid the normal-equation route: the ridge oracle
//! runs plain gradient descent with backtracking line search on the raw
//! feature matrices, and the vertex oracles recover quadratic minimizers
//! from function evaluations alone. They exist so the test suite can check
//! the solver against an implementation that shares nothing with it beyond
//! the objective definition.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::linalg::frobenius;

use super::{weight_gradient, weight_objective, WeightTask};

/// Gradient descent with Armijo backtracking on the module-wise weight
/// objective, from `w0` until ‖∇f‖_F < `grad_tol`.
pub fn ridge_oracle(
    tasks: &[WeightTask<'_>],
    lambda: f64,
    w_anc: &DMatrix<f64>,
    w0: &DMatrix<f64>,
    grad_tol: f64,
    max_iters: usize,
) -> Result<DMatrix<f64>> {
    let mut w = w0.clone();
    let mut f = weight_objective(&w, tasks, lambda, w_anc);
    for _ in 0..max_iters {
        let grad = weight_gradient(&w, tasks, lambda, w_anc);
        let gnorm = frobenius(&grad);
        if gnorm < grad_tol {
            return Ok(w);
        }
        // The gradient map is affine, so grad(w+u) − grad(w) = H·u exactly;
        // evaluating it at the unit direction u = g/‖g‖ gives the curvature
        // along the ray and with it the exact line-search step
        // t* = ‖g‖²/(gᵀHg), which already satisfies Armijo with c = 1e-4.
        let unit = &grad / gnorm;
        let h_unit = weight_gradient(&(&w + &unit), tasks, lambda, w_anc) - &grad;
        let curvature = unit.dot(&h_unit);
        if !(curvature > 0.0) {
            return Err(CoreError::Numerical(format!(
                "ridge oracle saw non-positive curvature {curvature}"
            )));
        }
        let t_star = 1.0 / curvature;
        // Armijo backtracking from t*: f(w − t·g) ≤ f(w) − 1e-4·t·‖g‖².
        let mut t = t_star;
        let mut accepted = false;
        while t > t_star * 1e-8 {
            let candidate = &w - &grad * t;
            let fc = weight_objective(&candidate, tasks, lambda, w_anc);
            if fc <= f - 1e-4 * t * gnorm * gnorm {
                w = candidate;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Below one ulp of f the decrease is unobservable; the exact
            // step is still a guaranteed descent direction on a convex
            // quadratic, so take it without the function-value test.
            w -= &grad * t_star;
            f = weight_objective(&w, tasks, lambda, w_anc);
        }
    }
    Err(CoreError::Numerical(format!(
        "ridge oracle did not reach gradient tolerance {grad_tol} in {max_iters} iterations"
    )))
}

/// Minimizer of a 1-D quadratic recovered from samples at −1, 0, 1.
///
/// For f(t) = a·t² + b·t + c: a = (f(1)+f(−1))/2 − f(0), b = (f(1)−f(−1))/2,
/// vertex at −b/(2a). Errors when the curvature is not positive.
pub fn quadratic_vertex_1d(f: impl Fn(f64) -> f64) -> Result<f64> {
    let fm = f(-1.0);
    let f0 = f(0.0);
    let fp = f(1.0);
    let a = 0.5 * (fp + fm) - f0;
    let b = 0.5 * (fp - fm);
    if !(a > 0.0) {
        return Err(CoreError::Numerical(format!(
            "1-D quadratic fit has non-positive curvature {a}"
        )));
    }
    Ok(-b / (2.0 * a))
}

/// Minimizer of a 2-D quadratic recovered from six samples.
///
/// f(u, v) = a·u² + b·v² + c·u·v + d·u + e·v + g is fitted at
/// (0,0), (±1,0), (0,±1), (1,1) and minimized by solving the 2×2 system
/// [2a c; c 2b]·[u v]ᵀ = −[d e]ᵀ.
pub fn quadratic_vertex_2d(f: impl Fn(f64, f64) -> f64) -> Result<(f64, f64)> {
    let g = f(0.0, 0.0);
    let fpu = f(1.0, 0.0);
    let fmu = f(-1.0, 0.0);
    let fpv = f(0.0, 1.0);
    let fmv = f(0.0, -1.0);
    let fuv = f(1.0, 1.0);
    let a = 0.5 * (fpu + fmu) - g;
    let b = 0.5 * (fpv + fmv) - g;
    let d = 0.5 * (fpu - fmu);
    let e = 0.5 * (fpv - fmv);
    let c = fuv - g - a - b - d - e;
    let det = 4.0 * a * b - c * c;
    if !(det > 0.0 && a > 0.0) {
        return Err(CoreError::Numerical(format!(
            "2-D quadratic fit is not positive definite (a={a}, b={b}, c={c})"
        )));
    }
    let u = (-2.0 * b * d + c * e) / det;
    let v = (-2.0 * a * e + c * d) / det;
    Ok((u, v))
}

/// Coordinate-wise vertex oracle for a separable vector objective: for each
/// coordinate i, minimizes t ↦ objective with coordinate i set to t.
pub fn separable_vector_argmin(
    dim: usize,
    objective: impl Fn(&DVector<f64>) -> f64,
    base_point: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(dim);
    for i in 0..dim {
        let f = |t: f64| {
            let mut x = base_point.clone();
            x[i] = t;
            objective(&x)
        };
        out[i] = quadratic_vertex_1d(f)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{module_stats, solve_weight, task_weight, ModuleTaskStats};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn vertex_1d_recovers_known_minimizer() {
        // f(t) = 3(t − 0.7)² + 2.
        let f = |t: f64| 3.0 * (t - 0.7) * (t - 0.7) + 2.0;
        assert!((quadratic_vertex_1d(f).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn vertex_2d_recovers_known_minimizer() {
        // f(u,v) = (u−1)² + 2(v+0.5)² + 0.3(u−1)(v+0.5).
        let f = |u: f64, v: f64| {
            let du = u - 1.0;
            let dv = v + 0.5;
            du * du + 2.0 * dv * dv + 0.3 * du * dv
        };
        let (u, v) = quadratic_vertex_2d(f).unwrap();
        assert!((u - 1.0).abs() < 1e-10);
        assert!((v + 0.5).abs() < 1e-10);
    }

    #[test]
    fn oracle_agrees_with_closed_form_on_single_task_exact_fit() {
        // N=1, α=0 (targets are the current features), λ=0⁺: the closed form
        // returns the expert weight; the oracle must find the same point.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 3, 8);
        let w1 = rand_mat(&mut rng, 2, 3);
        let (g, c) = module_stats(&x, &x, 8).unwrap();
        let omega = task_weight(&g, 1e-8);
        let stats = [ModuleTaskStats {
            g,
            c,
            omega,
            n_effective: 8,
        }];
        let w_anc = rand_mat(&mut rng, 2, 3);
        let (w_star, _) = solve_weight(&stats, &[&w1], &w_anc, 0.0, 1e-13).unwrap();
        assert!(frobenius(&(&w_star - &w1)) < 1e-9);

        let tasks = [WeightTask {
            omega,
            n: 8,
            x_cal: &x,
            x_tgt: &x,
            w_expert: &w1,
        }];
        let oracle = ridge_oracle(&tasks, 0.0, &w_anc, &w_anc, 1e-10, 200_000).unwrap();
        assert!(frobenius(&(&oracle - &w1)) < 1e-6);
    }

    #[test]
    fn oracle_certifies_convexity_of_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x1 = rand_mat(&mut rng, 3, 5);
        let x2 = rand_mat(&mut rng, 3, 5);
        let t1 = &x1 * 0.8 + rand_mat(&mut rng, 3, 5) * 0.1;
        let t2 = &x2 * 0.9 + rand_mat(&mut rng, 3, 5) * 0.1;
        let w1 = rand_mat(&mut rng, 4, 3);
        let w2 = rand_mat(&mut rng, 4, 3);
        let w_anc = rand_mat(&mut rng, 4, 3);
        let lambda = 0.05;

        let (g1, c1) = module_stats(&x1, &t1, 5).unwrap();
        let (g2, c2) = module_stats(&x2, &t2, 5).unwrap();
        let stats = [
            ModuleTaskStats {
                omega: task_weight(&g1, 1e-8),
                g: g1,
                c: c1,
                n_effective: 5,
            },
            ModuleTaskStats {
                omega: task_weight(&g2, 1e-8),
                g: g2,
                c: c2,
                n_effective: 5,
            },
        ];
        let (w_star, info) = solve_weight(&stats, &[&w1, &w2], &w_anc, lambda, 1e-13).unwrap();
        assert!(info.stationary_residual <= 1e-8 * info.rhs_norm);

        let tasks = [
            WeightTask {
                omega: stats[0].omega,
                n: 5,
                x_cal: &x1,
                x_tgt: &t1,
                w_expert: &w1,
            },
            WeightTask {
                omega: stats[1].omega,
                n: 5,
                x_cal: &x2,
                x_tgt: &t2,
                w_expert: &w2,
            },
        ];
        let oracle = ridge_oracle(&tasks, lambda, &w_anc, &w_anc, 1e-10, 200_000).unwrap();
        // Agreement and mutual optimality certificates.
        let rel = frobenius(&(&oracle - &w_star)) / frobenius(&w_star).max(1e-300);
        assert!(rel < 1e-6, "oracle disagrees: relative {rel}");
        let f_star = weight_objective(&w_star, &tasks, lambda, &w_anc);
        let f_oracle = weight_objective(&oracle, &tasks, lambda, &w_anc);
        assert!(f_oracle <= f_star + 1e-12);
        let grad_at_star = weight_gradient(&w_star, &tasks, lambda, &w_anc);
        assert!(frobenius(&grad_at_star) <= 1e-8 * (1.0 + f_star));
    }
}
