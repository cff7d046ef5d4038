//! Implicit differentiation of NNLS / NMF solutions with respect to the
//! activations `A`.
//!
//! At a KKT point with strict complementarity every coordinate is either
//! free (`u > 0`, multiplier 0) or clamped (`u = 0`, multiplier > 0). The
//! linearized complementarity rows `λ du + u dλ = 0` then pin `du = 0` on
//! clamped coordinates and `dλ = 0` on free ones, and what remains of
//! `∂₁F · d = −∂₂F · dA` is a symmetric system on the free coordinates that
//! is solved by conjugate gradient:
//!
//! * transform mode (`W` fixed): `(WᵀW)_FF du_F = W_Fᵀ da`, one system per row;
//! * fit mode (`U` and `W` both move): the Hessian of `½‖A − UWᵀ‖²`
//!   restricted to the free coordinates of both factors. Its null space
//!   contains the column rescalings `(U_j, −W_j)`, which are projected out,
//!   so the minimum-norm solution is returned.

use rayon::prelude::*;

use crate::cg;
use crate::error::{CraftError, Result};
use crate::nmf::FactorizationState;
use crate::nnls::{kkt_residual, NnlsSolution};
use crate::tensor::{dot, Matrix};

/// Coordinates where both the primal value and the multiplier fall below this
/// margin violate strict complementarity.
pub const DEGENERACY_MARGIN: f64 = 1e-7;
/// Largest KKT residual accepted as a solution to differentiate at.
pub const KKT_TOLERANCE: f64 = 1e-6;
pub const CG_TOLERANCE: f64 = 1e-10;
/// Dense Jacobians are only materialized below this many entries.
pub const DENSE_LIMIT: usize = 1_000_000;

/// The four stacked KKT blocks of the NMF optimality function.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityResidual {
    /// `(UWᵀ − A)W − Ū`
    pub stat_u: Matrix,
    /// `(WUᵀ − Aᵀ)U − W̄`
    pub stat_w: Matrix,
    /// `Ū ⊙ U`
    pub slack_u: Matrix,
    /// `W̄ ⊙ W`
    pub slack_w: Matrix,
}

impl OptimalityResidual {
    pub fn max_abs(&self) -> f64 {
        [&self.stat_u, &self.stat_w, &self.slack_u, &self.slack_w]
            .iter()
            .map(|m| m.max_abs())
            .fold(0.0, f64::max)
    }
}

pub fn optimality_fn(
    u: &Matrix,
    w: &Matrix,
    dual_u: &Matrix,
    dual_w: &Matrix,
    a: &Matrix,
) -> Result<OptimalityResidual> {
    let (n, p) = a.shape();
    let r = u.cols();
    if u.shape() != (n, r) || w.shape() != (p, r) || dual_u.shape() != (n, r) || dual_w.shape() != (p, r) {
        return Err(CraftError::arg(format!(
            "optimality_fn shapes: A {:?}, U {:?}, W {:?}, dual_U {:?}, dual_W {:?}",
            a.shape(),
            u.shape(),
            w.shape(),
            dual_u.shape(),
            dual_w.shape()
        )));
    }
    let resid = u.matmul_t(w).sub(a);
    Ok(OptimalityResidual {
        stat_u: resid.matmul(w).sub(dual_u),
        stat_w: resid.t_matmul(u).sub(dual_w),
        slack_u: dual_u.zip_map(u, |l, x| l * x),
        slack_w: dual_w.zip_map(w, |l, x| l * x),
    })
}

/// Splits coordinates into free (`true`) and clamped (`false`), or reports
/// every coordinate where strict complementarity fails.
fn classify(primal: &Matrix, dual: &Matrix, row_offset: usize) -> std::result::Result<Vec<bool>, Vec<(usize, usize)>> {
    let mut free = Vec::with_capacity(primal.as_slice().len());
    let mut bad = Vec::new();
    for i in 0..primal.rows() {
        for j in 0..primal.cols() {
            let (x, l) = (primal[(i, j)], dual[(i, j)]);
            if x > DEGENERACY_MARGIN {
                free.push(true);
            } else if l > DEGENERACY_MARGIN {
                free.push(false);
            } else {
                bad.push((row_offset + i, j));
                free.push(false);
            }
        }
    }
    if bad.is_empty() {
        Ok(free)
    } else {
        Err(bad)
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Transform {
        w: Matrix,
        gram: Matrix,
        free: Vec<Vec<usize>>,
    },
    Fit {
        u: Matrix,
        w: Matrix,
        resid: Matrix,
        free_u: Vec<bool>,
        free_w: Vec<bool>,
        /// Orthonormal basis of the rescaling directions, flattened `[dU; dW]`.
        gauge: Vec<Vec<f64>>,
    },
}

/// Linear map `dA ↦ dU` of the solution's sensitivity to its input, with adjoint.
#[derive(Debug, Clone)]
pub struct ConceptJacobian {
    n: usize,
    p: usize,
    r: usize,
    kind: Kind,
}

/// Transform-mode Jacobian of `U = argmin_{U≥0} ½‖A − UWᵀ‖²` with `W` held fixed.
pub fn jacobian_transform(a: &Matrix, w: &Matrix, sol: &NnlsSolution) -> Result<ConceptJacobian> {
    let (n, p) = a.shape();
    let r = w.cols();
    if w.rows() != p || sol.u.shape() != (n, r) || sol.dual_u.shape() != (n, r) {
        return Err(CraftError::arg("solution shapes do not match A and W"));
    }
    let kkt = kkt_residual(a, w, &sol.u, &sol.dual_u);
    if !(kkt < KKT_TOLERANCE) {
        return Err(CraftError::Numerical(format!(
            "KKT residual {kkt:e} too large to differentiate (need < {KKT_TOLERANCE:e})"
        )));
    }
    let mask = classify(&sol.u, &sol.dual_u, 0).map_err(|coords| CraftError::Degenerate { coords })?;
    let free = mask
        .chunks(r)
        .map(|row| row.iter().enumerate().filter(|(_, f)| **f).map(|(j, _)| j).collect())
        .collect();
    Ok(ConceptJacobian {
        n,
        p,
        r,
        kind: Kind::Transform {
            w: w.clone(),
            gram: w.t_matmul(w),
            free,
        },
    })
}

/// Fit-mode Jacobian of the `U` factor of an NMF solution.
pub fn jacobian_fit(a: &Matrix, state: &FactorizationState) -> Result<ConceptJacobian> {
    let (n, p) = a.shape();
    let r = state.rank();
    let res = optimality_fn(&state.u, &state.w, &state.dual_u, &state.dual_w, a)?.max_abs();
    if !(res < KKT_TOLERANCE) {
        return Err(CraftError::Numerical(format!(
            "KKT residual {res:e} too large to differentiate (need < {KKT_TOLERANCE:e})"
        )));
    }
    let free_u = classify(&state.u, &state.dual_u, 0);
    let free_w = classify(&state.w, &state.dual_w, n);
    let (free_u, free_w) = match (free_u, free_w) {
        (Ok(fu), Ok(fw)) => (fu, fw),
        (fu, fw) => {
            let mut coords = fu.err().unwrap_or_default();
            coords.extend(fw.err().unwrap_or_default());
            return Err(CraftError::Degenerate { coords });
        }
    };

    let mut gauge: Vec<Vec<f64>> = Vec::new();
    for j in 0..r {
        let mut v = vec![0.0; (n + p) * r];
        for i in 0..n {
            v[i * r + j] = state.u[(i, j)];
        }
        for i in 0..p {
            v[n * r + i * r + j] = -state.w[(i, j)];
        }
        for q in &gauge {
            let c = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
        }
        let nv = dot(&v, &v).sqrt();
        if nv > 1e-12 {
            v.iter_mut().for_each(|x| *x /= nv);
            gauge.push(v);
        }
    }

    Ok(ConceptJacobian {
        n,
        p,
        r,
        kind: Kind::Fit {
            u: state.u.clone(),
            w: state.w.clone(),
            resid: state.u.matmul_t(&state.w).sub(a),
            free_u,
            free_w,
            gauge,
        },
    })
}

fn solve_block(gram: &Matrix, free: &[usize], rhs: &[f64]) -> Result<Vec<f64>> {
    let k = free.len();
    let op = |v: &[f64], out: &mut [f64]| {
        for (a, &fa) in free.iter().enumerate() {
            out[a] = free.iter().zip(v).map(|(&fb, x)| gram[(fa, fb)] * x).sum();
        }
    };
    let mut x = vec![0.0; k];
    let out = cg::solve(op, rhs, &mut x, CG_TOLERANCE, 10 * k.max(1) + 10).map_err(CraftError::Numerical)?;
    if !out.converged {
        return Err(CraftError::Numerical(format!(
            "CG stalled at residual {:e} on the free block",
            out.residual_norm
        )));
    }
    Ok(x)
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let c = dot(v, q);
        v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
    }
}

impl ConceptJacobian {
    pub fn input_shape(&self) -> (usize, usize) {
        (self.n, self.p)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.n, self.r)
    }

    /// Whether coordinate `(i, j)` of `U` is clamped at zero.
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        match &self.kind {
            Kind::Transform { free, .. } => !free[i].contains(&j),
            Kind::Fit { free_u, .. } => !free_u[i * self.r + j],
        }
    }

    /// `J · dA`
    pub fn apply(&self, d_a: &Matrix) -> Result<Matrix> {
        if d_a.shape() != (self.n, self.p) {
            return Err(CraftError::arg(format!(
                "perturbation has shape {:?}, expected {:?}",
                d_a.shape(),
                (self.n, self.p)
            )));
        }
        match &self.kind {
            Kind::Transform { w, gram, free } => {
                let rows: Vec<Vec<f64>> = (0..self.n)
                    .into_par_iter()
                    .map(|i| {
                        let mut out = vec![0.0; self.r];
                        let da = d_a.row(i);
                        if free[i].is_empty() || da.iter().all(|&v| v == 0.0) {
                            return Ok(out);
                        }
                        let rhs: Vec<f64> = free[i]
                            .iter()
                            .map(|&j| (0..self.p).map(|k| w[(k, j)] * da[k]).sum())
                            .collect();
                        let x = solve_block(gram, &free[i], &rhs)?;
                        for (&j, v) in free[i].iter().zip(x) {
                            out[j] = v;
                        }
                        Ok(out)
                    })
                    .collect::<Result<_>>()?;
                Ok(Matrix::new(self.n, self.r, rows.concat())?)
            }
            Kind::Fit { u, w, .. } => {
                let rhs_u = d_a.matmul(w);
                let rhs_w = d_a.t_matmul(u);
                let z = self.fit_solve(rhs_u.as_slice(), rhs_w.as_slice())?;
                Ok(Matrix::new(self.n, self.r, z[..self.n * self.r].to_vec())?)
            }
        }
    }

    /// `Jᵀ · Y`; with `Y` the indicator of column `i`, this is `∇_A Σ_rows U_{·,i}`.
    pub fn vjp(&self, cotangent: &Matrix) -> Result<Matrix> {
        if cotangent.shape() != (self.n, self.r) {
            return Err(CraftError::arg(format!(
                "cotangent has shape {:?}, expected {:?}",
                cotangent.shape(),
                (self.n, self.r)
            )));
        }
        match &self.kind {
            Kind::Transform { w, gram, free } => {
                let rows: Vec<Vec<f64>> = (0..self.n)
                    .into_par_iter()
                    .map(|i| {
                        let mut out = vec![0.0; self.p];
                        let y = cotangent.row(i);
                        if free[i].is_empty() || free[i].iter().all(|&j| y[j] == 0.0) {
                            return Ok(out);
                        }
                        let rhs: Vec<f64> = free[i].iter().map(|&j| y[j]).collect();
                        let x = solve_block(gram, &free[i], &rhs)?;
                        for (k, o) in out.iter_mut().enumerate() {
                            *o = free[i].iter().zip(&x).map(|(&j, v)| w[(k, j)] * v).sum();
                        }
                        Ok(out)
                    })
                    .collect::<Result<_>>()?;
                Ok(Matrix::new(self.n, self.p, rows.concat())?)
            }
            Kind::Fit { u, w, .. } => {
                let zeros = vec![0.0; self.p * self.r];
                let z = self.fit_solve(cotangent.as_slice(), &zeros)?;
                let zu = Matrix::new(self.n, self.r, z[..self.n * self.r].to_vec())?;
                let zw = Matrix::new(self.p, self.r, z[self.n * self.r..].to_vec())?;
                Ok(zu.matmul_t(w).add(&u.matmul_t(&zw)))
            }
        }
    }

    /// Dense `(n·r) × (n·p)` matrix with rows indexed by `i·r + j` of `U` and
    /// columns by `k·p + l` of `A`. `None` above [`DENSE_LIMIT`] entries.
    pub fn dense(&self) -> Result<Option<Matrix>> {
        let (rows, cols) = (self.n * self.r, self.n * self.p);
        if self.n * self.r * self.p > DENSE_LIMIT {
            return Ok(None);
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut probe = Matrix::zeros(self.n, self.p);
        for c in 0..cols {
            probe.as_mut_slice()[c] = 1.0;
            let col = self.apply(&probe)?;
            probe.as_mut_slice()[c] = 0.0;
            for (rix, v) in col.as_slice().iter().enumerate() {
                out[(rix, c)] = *v;
            }
        }
        Ok(Some(out))
    }

    /// Solves the masked fit-mode Hessian system for right-hand side `[b_u; b_w]`.
    fn fit_solve(&self, b_u: &[f64], b_w: &[f64]) -> Result<Vec<f64>> {
        let Kind::Fit {
            u,
            w,
            resid,
            free_u,
            free_w,
            gauge,
        } = &self.kind
        else {
            unreachable!("fit_solve on a transform-mode Jacobian");
        };
        let (n, p, r) = (self.n, self.p, self.r);
        let nu = n * r;
        let mask: Vec<bool> = free_u.iter().chain(free_w).copied().collect();

        let mut rhs: Vec<f64> = b_u.iter().chain(b_w).zip(&mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
        project_out(&mut rhs, gauge);

        let op = |z: &[f64], out: &mut [f64]| {
            let du = Matrix::new(n, r, z[..nu].to_vec()).expect("shape");
            let dw = Matrix::new(p, r, z[nu..].to_vec()).expect("shape");
            // d/d(U,W) of the stationarity blocks (UWᵀ − A)W and (WUᵀ − Aᵀ)U
            let recon = du.matmul_t(w).add(&u.matmul_t(&dw));
            let hu = recon.matmul(w).add(&resid.matmul(&dw));
            let hw = recon.t_matmul(u).add(&resid.t_matmul(&du));
            for (k, (o, v)) in out.iter_mut().zip(hu.as_slice().iter().chain(hw.as_slice())).enumerate() {
                *o = if mask[k] { *v } else { 0.0 };
            }
            project_out(out, gauge);
        };
        let mut z = vec![0.0; rhs.len()];
        let dim = mask.iter().filter(|m| **m).count();
        let out = cg::solve(op, &rhs, &mut z, CG_TOLERANCE, 10 * dim.max(1) + 10).map_err(CraftError::Numerical)?;
        if !out.converged {
            return Err(CraftError::Numerical(format!(
                "CG stalled at residual {:e} on the fit-mode system",
                out.residual_norm
            )));
        }
        project_out(&mut z, gauge);
        Ok(z)
    }
}
