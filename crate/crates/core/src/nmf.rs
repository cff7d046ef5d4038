//! Non-negative matrix factorization `A ≈ U Wᵀ` by alternating NNLS solves.

use nalgebra::DMatrix;

use crate::error::{CraftError, Result};
use crate::nnls::{objective, solve_nnls, AdmmParams, NnlsSolution};
use crate::rng::{streams, Rng};
use crate::tensor::{norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmfInit {
    /// Non-negative double SVD (deterministic).
    Nndsvd,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfParams {
    pub rank: usize,
    pub outer_iters: usize,
    pub admm: AdmmParams,
    pub init: NmfInit,
    /// Stop once an outer iteration lowers the objective by less than this
    /// fraction of its current value.
    pub objective_tol: f64,
    /// Also stop once the objective falls below `objective_tol · ½‖A‖²`, or
    /// once the joint KKT residual of the unit-normalized factors
    /// falls below `kkt_tol · max(1, max|A|)`.
    pub kkt_tol: f64,
}

impl NmfParams {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            outer_iters: 200,
            admm: AdmmParams::default(),
            init: NmfInit::Nndsvd,
            objective_tol: 1e-9,
            kkt_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationState {
    pub u: Matrix,
    pub w: Matrix,
    pub dual_u: Matrix,
    pub dual_w: Matrix,
    /// Objective after initialization followed by one entry per outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    /// Joint KKT residual of the returned factors.
    pub kkt_residual: f64,
}

impl FactorizationState {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }
}

fn check_input(a: &Matrix, r: usize) -> Result<()> {
    let (n, p) = a.shape();
    if r == 0 || r > n.min(p) {
        return Err(CraftError::arg(format!(
            "rank {r} must lie in 1..={} for a {n}x{p} matrix",
            n.min(p)
        )));
    }
    if !a.is_finite() {
        return Err(CraftError::Data("activations contain non-finite values".into()));
    }
    if !a.is_nonnegative() {
        return Err(CraftError::Data(format!(
            "NMF requires non-negative input, minimum entry is {}",
            a.min()
        )));
    }
    Ok(())
}

/// Initial non-negative factors `(U0, W0)` of shapes `n×r` and `p×r`.
pub fn init_factors(a: &Matrix, r: usize, init: NmfInit) -> Result<(Matrix, Matrix)> {
    check_input(a, r)?;
    let (n, p) = a.shape();
    match init {
        NmfInit::Nndsvd => Ok(nndsvd(a, r)),
        NmfInit::Random { seed } => {
            let mean = a.as_slice().iter().sum::<f64>() / (n * p) as f64;
            let scale = (mean / r as f64).sqrt();
            let mut rng = Rng::new(seed, streams::NMF_INIT);
            let u = Matrix::from_fn(n, r, |_, _| scale * rng.uniform());
            let w = Matrix::from_fn(p, r, |_, _| scale * rng.uniform());
            Ok((u, w))
        }
    }
}

fn nndsvd(a: &Matrix, r: usize) -> (Matrix, Matrix) {
    let (n, p) = a.shape();
    let mut u0 = Matrix::zeros(n, r);
    let mut w0 = Matrix::zeros(p, r);
    let svd = DMatrix::from_row_slice(n, p, a.as_slice()).svd(true, true);
    let (Some(left), Some(right_t)) = (svd.u, svd.v_t) else {
        return (u0, w0);
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let positive = |v: &[f64]| v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect::<Vec<_>>();
    let negative = |v: &[f64]| v.iter().map(|&x| if x < 0.0 { -x } else { 0.0 }).collect::<Vec<_>>();

    for (j, &k) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[k];
        if s <= 0.0 {
            break;
        }
        let x: Vec<f64> = left.column(k).iter().copied().collect();
        let y: Vec<f64> = right_t.row(k).iter().copied().collect();
        let (xs, ys, weight) = if j == 0 {
            // Perron vectors of a non-negative matrix have a single sign.
            let xs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
            let ys: Vec<f64> = y.iter().map(|v| v.abs()).collect();
            (xs, ys, 1.0)
        } else {
            let (xp, xn, yp, yn) = (positive(&x), negative(&x), positive(&y), negative(&y));
            let mp = norm(&xp) * norm(&yp);
            let mn = norm(&xn) * norm(&yn);
            if mp >= mn {
                (xp, yp, mp)
            } else {
                (xn, yn, mn)
            }
        };
        let (nx, ny) = (norm(&xs), norm(&ys));
        if weight <= 0.0 || nx == 0.0 || ny == 0.0 {
            continue;
        }
        let scale = (s * weight).sqrt();
        for (i, v) in xs.iter().enumerate() {
            u0[(i, j)] = scale * v / nx;
        }
        for (i, v) in ys.iter().enumerate() {
            w0[(i, j)] = scale * v / ny;
        }
    }
    (u0, w0)
}

/// Scales each column of `W` to unit norm and pushes the scale into `U`
/// (and the duals accordingly). Zero columns are left untouched.
fn normalize_columns(state: &mut FactorizationState) {
    for (j, s) in state.w.col_norms().into_iter().enumerate() {
        if s <= 0.0 {
            continue;
        }
        for i in 0..state.w.rows() {
            state.w[(i, j)] /= s;
            state.dual_w[(i, j)] *= s;
        }
        for i in 0..state.u.rows() {
            state.u[(i, j)] *= s;
            state.dual_u[(i, j)] /= s;
        }
    }
}

/// Fits `A ≈ U Wᵀ` with `U, W ≥ 0`.
///
/// Each outer iteration solves the `W` subproblem and then the `U`
/// subproblem to ADMM tolerance, warm-started from the previous duals, so
/// the returned `U` is exactly the NNLS coefficients of `A` in the returned
/// bank. A subproblem solution that would raise the objective is discarded,
/// which keeps the trace non-increasing. On return the columns of `W` have
/// unit norm.
pub fn fit_nmf(a: &Matrix, params: &NmfParams) -> Result<FactorizationState> {
    let r = params.rank;
    let (u0, w0) = init_factors(a, r, params.init)?;
    params.admm.validate()?;
    if !(params.objective_tol > 0.0) {
        return Err(CraftError::arg("objective_tol must be > 0"));
    }
    let (n, p) = a.shape();
    let at = a.transpose();

    let mut sol_u = NnlsSolution {
        u: u0,
        dual_u: Matrix::zeros(n, r),
        iterations: 0,
        kkt_residual: f64::INFINITY,
        converged: false,
    };
    let mut sol_w = NnlsSolution {
        u: w0,
        dual_u: Matrix::zeros(p, r),
        iterations: 0,
        kkt_residual: f64::INFINITY,
        converged: false,
    };
    let mut current = objective(a, &sol_u.u, &sol_w.u);
    let mut trace = vec![current];
    let mut converged = current == 0.0;
    let kkt_target = params.kkt_tol * a.max_abs().max(1.0);
    let exact_target = params.objective_tol * 0.5 * a.inner(a);

    for _ in 0..params.outer_iters {
        if converged {
            break;
        }
        let cand_w = solve_nnls(&at, &sol_u.u, &params.admm, Some(&sol_w))?;
        let obj_w = objective(a, &sol_u.u, &cand_w.u);
        let mut inner_ok = cand_w.converged;
        if obj_w <= current {
            sol_w = cand_w;
            current = obj_w;
        }
        let cand_u = solve_nnls(a, &sol_w.u, &params.admm, Some(&sol_u))?;
        let obj_u = objective(a, &cand_u.u, &sol_w.u);
        inner_ok &= cand_u.converged;
        if obj_u <= current {
            sol_u = cand_u;
            current = obj_u;
        }

        let previous = *trace.last().expect("trace starts non-empty");
        trace.push(current);
        let stalled = previous - current <= params.objective_tol * previous;
        converged = current <= f64::MIN_POSITIVE
            || (inner_ok
                && (current <= exact_target
                    || stalled
                    || assemble(&sol_u, &sol_w, a)?.kkt_residual <= kkt_target));
    }

    let mut state = assemble(&sol_u, &sol_w, a)?;
    state.objective_trace = trace;
    state.converged = converged;
    Ok(state)
}

/// Unit-normalized factors with their joint KKT residual.
fn assemble(sol_u: &NnlsSolution, sol_w: &NnlsSolution, a: &Matrix) -> Result<FactorizationState> {
    let mut state = FactorizationState {
        u: sol_u.u.clone(),
        w: sol_w.u.clone(),
        dual_u: sol_u.dual_u.clone(),
        dual_w: sol_w.dual_u.clone(),
        objective_trace: Vec::new(),
        converged: false,
        kkt_residual: 0.0,
    };
    normalize_columns(&mut state);
    state.kkt_residual = crate::implicit::optimality_fn(&state.u, &state.w, &state.dual_u, &state.dual_w, a)?.max_abs();
    Ok(state)
}

/// Concept coefficients of new activations in a fixed bank:
/// `argmin_{U≥0} ½‖A_new − U Wᵀ‖²_F`, row by row.
pub fn transform(a_new: &Matrix, w: &Matrix, admm: &AdmmParams) -> Result<Matrix> {
    Ok(transform_solution(a_new, w, admm)?.u)
}

/// Like [`transform`] but keeps the multipliers needed for differentiation.
pub fn transform_solution(a_new: &Matrix, w: &Matrix, admm: &AdmmParams) -> Result<NnlsSolution> {
    if a_new.cols() != w.rows() {
        return Err(CraftError::arg(format!(
            "activations have {} columns but the bank expects {}",
            a_new.cols(),
            w.rows()
        )));
    }
    solve_nnls(a_new, w, admm, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn nndsvd_reconstructs_diagonal() {
        let a = m(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let (u, w) = init_factors(&a, 2, NmfInit::Nndsvd).unwrap();
        assert!(u.is_nonnegative() && w.is_nonnegative());
        assert!(u.matmul_t(&w).sub(&a).max_abs() < 1e-12);
    }

    #[test]
    fn random_init_is_deterministic() {
        let a = Matrix::from_fn(5, 4, |i, j| (i * 4 + j) as f64 / 7.0);
        let x = init_factors(&a, 3, NmfInit::Random { seed: 11 }).unwrap();
        let y = init_factors(&a, 3, NmfInit::Random { seed: 11 }).unwrap();
        assert_eq!(x, y);
        assert!(x.0.is_nonnegative() && x.1.is_nonnegative());
    }

    #[test]
    fn zero_input_zero_factors() {
        let a = Matrix::zeros(3, 4);
        let (u, w) = init_factors(&a, 2, NmfInit::Nndsvd).unwrap();
        assert_eq!(u.max_abs(), 0.0);
        assert_eq!(w.max_abs(), 0.0);
        let s = fit_nmf(&a, &NmfParams::new(2)).unwrap();
        assert_eq!(s.u.max_abs(), 0.0);
        assert_eq!(s.w.max_abs(), 0.0);
        assert_eq!(s.objective(), 0.0);
    }

    #[test]
    fn init_errors() {
        let a = Matrix::filled(2, 3, 1.0);
        assert!(matches!(init_factors(&a, 3, NmfInit::Nndsvd), Err(CraftError::Argument(_))));
        assert!(matches!(init_factors(&a, 0, NmfInit::Nndsvd), Err(CraftError::Argument(_))));
        let mut neg = a.clone();
        neg[(1, 1)] = -1e-3;
        assert!(matches!(init_factors(&neg, 1, NmfInit::Nndsvd), Err(CraftError::Data(_))));
    }

    #[test]
    fn exact_factorization_fixture() {
        let u = m(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let w = m(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let a = u.matmul_t(&w);
        let s = fit_nmf(&a, &NmfParams::new(2)).unwrap();
        assert!(s.objective() < 1e-6, "{}", s.objective());
    }

    #[test]
    fn perron_frobenius_rank_one() {
        let a = m(&[vec![1.0, 1.0], vec![1.0, 0.0]]);
        let s = fit_nmf(&a, &NmfParams::new(1)).unwrap();
        let second = (5f64.sqrt() - 1.0) / 2.0;
        assert!((s.objective() - 0.5 * second * second).abs() < 1e-3, "{}", s.objective());
    }

    #[test]
    fn columns_normalized_and_nonnegative() {
        let a = Matrix::from_fn(6, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.5);
        let s = fit_nmf(&a, &NmfParams::new(3)).unwrap();
        for n in s.w.col_norms() {
            assert!((n - 1.0).abs() < 1e-10);
        }
        for mat in [&s.u, &s.w, &s.dual_u, &s.dual_w] {
            assert!(mat.as_slice().iter().all(|v| *v >= 0.0 && !(v.is_sign_negative())));
        }
    }

    #[test]
    fn transform_checks_columns() {
        let w = Matrix::identity(3);
        assert!(transform(&Matrix::zeros(2, 2), &w, &AdmmParams::default()).is_err());
        let u = transform(&Matrix::zeros(2, 3), &w, &AdmmParams::default()).unwrap();
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn transform_active_set_example() {
        let a = m(&[vec![0.0, 1.0]]);
        let w = m(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let u = transform(&a, &w, &AdmmParams::default()).unwrap();
        assert_eq!(u[(0, 0)], 0.0);
        assert!((u[(0, 1)] - 0.5).abs() < 1e-8);
    }
}
