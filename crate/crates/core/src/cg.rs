//! Matrix-free conjugate gradient for symmetric positive (semi-)definite systems.

use crate::tensor::dot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Solves `op(x) = b` starting from the contents of `x`.
///
/// Stops once `‖b − op(x)‖ ≤ tol·‖b‖`. Returns `Err` when a search direction
/// has non-positive curvature, i.e. the operator is not positive definite on
/// the Krylov space.
pub fn solve<F>(op: F, b: &[f64], x: &mut [f64], tol: f64, max_iters: usize) -> Result<CgOutcome, String>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgOutcome {
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        });
    }
    let target = tol * bnorm;

    let mut ax = vec![0.0; n];
    op(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut ap = vec![0.0; n];

    for it in 0..max_iters {
        if rs.sqrt() <= target {
            return Ok(CgOutcome {
                iterations: it,
                residual_norm: rs.sqrt(),
                converged: true,
            });
        }
        op(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if curvature <= 0.0 || !curvature.is_finite() {
            return Err(format!("non-positive curvature {curvature:e} at iteration {it}"));
        }
        let alpha = rs / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    let residual_norm = rs.sqrt();
    Ok(CgOutcome {
        iterations: max_iters,
        residual_norm,
        converged: residual_norm <= target,
    })
}
