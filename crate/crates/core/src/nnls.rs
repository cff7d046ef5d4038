//! Non-negative least squares `min_{U≥0} ½‖A − U Wᵀ‖²_F` by ADMM.
//!
//! The problem separates over the rows of `A`, so every row is solved as an
//! independent `r`-dimensional problem with its own stopping test. Each ADMM
//! step is
//!
//! ```text
//! (WᵀW + ρI) ũ = Wᵀa + ρ(u + y)      (conjugate gradient)
//! u  = max(0, ũ − y)                  (projection)
//! y  = y + u − ũ                      (scaled dual ascent)
//! ```
//!
//! and the KKT multiplier of the constraint `u ≥ 0` is `ρ·y`. The final
//! iterate is replaced by an exact solve on its support once that support
//! stabilizes and the solve satisfies the KKT conditions.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cg;
use crate::error::{CraftError, Result};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmParams {
    pub rho: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    /// `None` means `10·r`.
    pub cg_max_iters: Option<usize>,
    pub cg_tol: f64,
}

impl Default for AdmmParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iters: 20_000,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            cg_max_iters: None,
            cg_tol: 1e-10,
        }
    }
}

impl AdmmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.rho) {
            return Err(CraftError::arg(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(positive(self.tol_primal) && positive(self.tol_dual) && positive(self.cg_tol)) {
            return Err(CraftError::arg("ADMM and CG tolerances must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(CraftError::arg("max_iters must be at least 1"));
        }
        Ok(())
    }

    fn cg_iters(&self, r: usize) -> usize {
        self.cg_max_iters.unwrap_or(10 * r).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub u: Matrix,
    /// KKT multipliers of `U ≥ 0`; nonnegative and complementary to `u`.
    pub dual_u: Matrix,
    /// Largest iteration count over rows.
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
}

/// `½‖A − U Wᵀ‖²_F`
pub fn objective(a: &Matrix, u: &Matrix, w: &Matrix) -> f64 {
    0.5 * a.sub(&u.matmul_t(w)).frobenius_sq()
}

/// Largest violation over the four KKT blocks: stationarity
/// `(UWᵀ − A)W − Ū`, primal feasibility, complementary slackness `Ū ⊙ U` and
/// dual feasibility.
pub fn kkt_residual(a: &Matrix, w: &Matrix, u: &Matrix, dual_u: &Matrix) -> f64 {
    let grad = u.matmul(&w.t_matmul(w)).sub(&a.matmul(w));
    let stat = grad.sub(dual_u).max_abs();
    let primal = u.as_slice().iter().fold(0.0f64, |m, &v| m.max(-v));
    let slack = u
        .as_slice()
        .iter()
        .zip(dual_u.as_slice())
        .fold(0.0f64, |m, (&x, &l)| m.max((x * l).abs()));
    let dual = dual_u.as_slice().iter().fold(0.0f64, |m, &v| m.max(-v));
    stat.max(primal).max(slack).max(dual)
}

struct RowOutcome {
    u: Vec<f64>,
    y: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Solves `min_{U≥0} ½‖A − U Wᵀ‖²_F` row by row.
///
/// Non-convergence is not an error: the last iterate is returned with
/// `converged == false`.
pub fn solve_nnls(
    a: &Matrix,
    w: &Matrix,
    params: &AdmmParams,
    warm: Option<&NnlsSolution>,
) -> Result<NnlsSolution> {
    params.validate()?;
    let (n, p) = a.shape();
    let r = w.cols();
    if w.rows() != p {
        return Err(CraftError::arg(format!(
            "A has {p} columns but W has {} rows",
            w.rows()
        )));
    }
    if r == 0 {
        return Err(CraftError::arg("rank must be at least 1"));
    }
    if !a.is_finite() || !w.is_finite() {
        return Err(CraftError::Data("A and W must be finite".into()));
    }
    if let Some(ws) = warm {
        if ws.u.shape() != (n, r) || ws.dual_u.shape() != (n, r) {
            return Err(CraftError::arg(format!(
                "warm start has shape {:?}, expected ({n}, {r})",
                ws.u.shape()
            )));
        }
    }

    let gram = w.t_matmul(w);
    let aw = a.matmul(w);
    let rows: Vec<RowOutcome> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (u0, y0) = match warm {
                Some(ws) => (
                    ws.u.row(i).iter().map(|&v| v.max(0.0)).collect(),
                    ws.dual_u.row(i).iter().map(|&v| v.max(0.0) / params.rho).collect(),
                ),
                None => (vec![0.0; r], vec![0.0; r]),
            };
            solve_row(&gram, aw.row(i), u0, y0, params)
        })
        .collect();

    let mut u = Matrix::zeros(n, r);
    let mut dual_u = Matrix::zeros(n, r);
    let mut iterations = 0;
    let mut converged = true;
    for (i, row) in rows.into_iter().enumerate() {
        u.row_mut(i).copy_from_slice(&row.u);
        for (d, y) in dual_u.row_mut(i).iter_mut().zip(&row.y) {
            *d = params.rho * y;
        }
        iterations = iterations.max(row.iterations);
        converged &= row.converged;
    }
    let kkt_residual = kkt_residual(a, w, &u, &dual_u);
    Ok(NnlsSolution {
        u,
        dual_u,
        iterations,
        kkt_residual,
        converged,
    })
}

fn gram_apply(gram: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(gram.row(i), v);
    }
}

/// `‖G u − Wᵀa − ρ y‖∞`
fn stationarity(gram: &Matrix, wta: &[f64], u: &[f64], y: &[f64], rho: f64, scratch: &mut [f64]) -> f64 {
    gram_apply(gram, u, scratch);
    scratch
        .iter()
        .zip(wta)
        .zip(y)
        .fold(0.0f64, |m, ((g, b), y)| m.max((g - b - rho * y).abs()))
}

fn solve_row(gram: &Matrix, wta: &[f64], mut u: Vec<f64>, mut y: Vec<f64>, params: &AdmmParams) -> RowOutcome {
    let r = u.len();
    if wta.iter().all(|&v| v == 0.0) {
        // Wᵀa = 0 makes u = 0 an exact KKT point with zero multipliers.
        return RowOutcome {
            u: vec![0.0; r],
            y: vec![0.0; r],
            iterations: 0,
            converged: true,
        };
    }
    let rho = params.rho;
    let cg_iters = params.cg_iters(r);
    let op = |v: &[f64], out: &mut [f64]| {
        gram_apply(gram, v, out);
        for (o, x) in out.iter_mut().zip(v) {
            *o += rho * x;
        }
    };

    let mut u_tilde = u.clone();
    let mut rhs = vec![0.0; r];
    let mut scratch = vec![0.0; r];
    let mut best = (f64::INFINITY, u.clone(), y.clone());
    let mut support: Vec<bool> = u.iter().map(|&v| v > 0.0).collect();

    for it in 1..=params.max_iters {
        for k in 0..r {
            rhs[k] = wta[k] + rho * (u[k] + y[k]);
        }
        // G + ρI is positive definite, so CG cannot hit non-positive curvature.
        let _ = cg::solve(op, &rhs, &mut u_tilde, params.cg_tol, cg_iters);

        let mut primal = 0.0f64;
        let mut change = 0.0f64;
        for k in 0..r {
            let shifted = u_tilde[k] - y[k];
            let next = if shifted > 0.0 { shifted } else { 0.0 };
            if next > 0.0 {
                y[k] = 0.0;
            } else {
                y[k] -= u_tilde[k];
            }
            primal = primal.max((u_tilde[k] - next).abs());
            change = change.max((next - u[k]).abs());
            u[k] = next;
        }
        let stat = stationarity(gram, wta, &u, &y, rho, &mut scratch);
        if stat < best.0 {
            best = (stat, u.clone(), y.clone());
        }
        let admm_done = primal <= params.tol_primal && rho * change <= params.tol_dual && stat <= params.tol_primal;

        let mut stable = true;
        for (s, &v) in support.iter_mut().zip(&u) {
            stable &= *s == (v > 0.0);
            *s = v > 0.0;
        }
        if admm_done || stable {
            if let Some((pu, py, residual)) = support_solve(gram, wta, rho, &support) {
                if residual <= params.tol_primal && residual <= stat {
                    return RowOutcome {
                        u: pu,
                        y: py,
                        iterations: it,
                        converged: true,
                    };
                }
            }
        }
        if admm_done {
            return RowOutcome {
                u,
                y,
                iterations: it,
                converged: true,
            };
        }
    }
    RowOutcome {
        u: best.1,
        y: best.2,
        iterations: params.max_iters,
        converged: false,
    }
}

/// Exact least-squares solution restricted to `support`, with its scaled
/// multipliers and KKT residual; `None` if it leaves the nonnegative orthant.
fn support_solve(gram: &Matrix, wta: &[f64], rho: f64, support: &[bool]) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let r = wta.len();
    let idx: Vec<usize> = (0..r).filter(|&k| support[k]).collect();
    let mut u = vec![0.0; r];
    if !idx.is_empty() {
        let m = idx.len();
        let g = DMatrix::from_fn(m, m, |i, j| gram[(idx[i], idx[j])]);
        let b = DVector::from_fn(m, |i, _| wta[idx[i]]);
        let coef = g.cholesky()?.solve(&b);
        if coef.iter().any(|&c| !(c > 0.0)) {
            return None;
        }
        for (i, &k) in idx.iter().enumerate() {
            u[k] = coef[i];
        }
    }
    let mut grad = vec![0.0; r];
    gram_apply(gram, &u, &mut grad);
    let mut y = vec![0.0; r];
    let mut residual = 0.0f64;
    for k in 0..r {
        let g = grad[k] - wta[k];
        if support[k] {
            residual = residual.max(g.abs());
        } else {
            y[k] = g.max(0.0) / rho;
            residual = residual.max((-g).max(0.0));
        }
    }
    Some((u, y, residual))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_fit_is_exact() {
        let i2 = Matrix::identity(2);
        let s = solve_nnls(&i2, &i2, &AdmmParams::default(), None).unwrap();
        assert!(s.converged);
        assert!(s.u.sub(&i2).max_abs() < 1e-8);
        assert!(s.dual_u.max_abs() < 1e-12);
        assert!(s.kkt_residual < 1e-8);
    }

    #[test]
    fn scalar_least_squares() {
        // (1 − u)² + u² is minimised at u = 1/2.
        let a = m(&[vec![1.0, 0.0]]);
        let w = m(&[vec![1.0], vec![1.0]]);
        let s = solve_nnls(&a, &w, &AdmmParams::default(), None).unwrap();
        assert!((s.u[(0, 0)] - 0.5).abs() < 1e-8);
        assert!((objective(&a, &s.u, &w) - 0.25).abs() < 1e-8);
    }

    #[test]
    fn active_constraint_example() {
        // Unconstrained optimum (−1, 1) violates u₁ ≥ 0; clamping gives (0, 1/2)
        // with multiplier 1/2 on the first coordinate.
        let a = m(&[vec![0.0, 1.0]]);
        let w = m(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let s = solve_nnls(&a, &w, &AdmmParams::default(), None).unwrap();
        assert!(s.converged);
        assert_eq!(s.u[(0, 0)], 0.0);
        assert!((s.u[(0, 1)] - 0.5).abs() < 1e-8);
        assert!((s.dual_u[(0, 0)] - 0.5).abs() < 1e-8);
        assert_eq!(s.dual_u[(0, 1)], 0.0);
        assert!(s.kkt_residual < 1e-8);
    }

    #[test]
    fn kkt_residual_of_exact_point() {
        let a = m(&[vec![0.0, 1.0]]);
        let w = m(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let u = m(&[vec![0.0, 0.5]]);
        let d = m(&[vec![0.5, 0.0]]);
        assert!(kkt_residual(&a, &w, &u, &d) < 1e-12);
        let i2 = Matrix::identity(2);
        assert!(kkt_residual(&i2, &i2, &i2, &Matrix::zeros(2, 2)) < 1e-12);
    }

    #[test]
    fn negative_entry_shows_in_residual() {
        let i2 = Matrix::identity(2);
        let mut u = i2.clone();
        u[(0, 1)] = -0.3;
        assert!(kkt_residual(&i2, &i2, &u, &Matrix::zeros(2, 2)) >= 0.3);
    }

    #[test]
    fn rank_deficient_w_is_allowed() {
        let a = m(&[vec![1.0, 2.0, 0.5]]);
        let w = m(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]);
        let s = solve_nnls(&a, &w, &AdmmParams::default(), None).unwrap();
        assert!(s.kkt_residual < 1e-7, "{}", s.kkt_residual);
        assert!((s.u[(0, 0)] + s.u[(0, 1)] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn non_convergence_is_flagged_not_an_error() {
        let a = m(&[vec![0.3, 1.0, 2.0]]);
        let w = m(&[vec![1.0, 0.2], vec![0.1, 1.0], vec![3.0, 0.5]]);
        let params = AdmmParams {
            max_iters: 1,
            ..Default::default()
        };
        let s = solve_nnls(&a, &w, &params, None).unwrap();
        assert!(!s.converged);
        assert!(s.u.is_nonnegative());
    }

    #[test]
    fn shape_and_parameter_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(solve_nnls(&a, &Matrix::zeros(2, 1), &AdmmParams::default(), None).is_err());
        assert!(solve_nnls(&a, &Matrix::zeros(3, 0), &AdmmParams::default(), None).is_err());
        let bad = AdmmParams {
            rho: 0.0,
            ..Default::default()
        };
        assert!(solve_nnls(&a, &Matrix::zeros(3, 1), &bad, None).is_err());
    }

    #[test]
    fn warm_start_from_solution_converges_immediately() {
        let a = m(&[vec![0.0, 1.0], vec![2.0, 0.5]]);
        let w = m(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let p = AdmmParams::default();
        let cold = solve_nnls(&a, &w, &p, None).unwrap();
        let warm = solve_nnls(&a, &w, &p, Some(&cold)).unwrap();
        assert!(warm.iterations <= 2, "{}", warm.iterations);
        assert!(warm.u.sub(&cold.u).max_abs() < 1e-8);
    }
}
