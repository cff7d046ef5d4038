//! Total Sobol indices of concept masks.
//!
//! Masks are drawn from an unscrambled Sobol' low-discrepancy sequence
//! (Joe–Kuo direction numbers) or from plain uniform noise, and the total
//! indices are estimated with the Jansen pick-freeze estimator.

use rayon::prelude::*;

use crate::error::{CraftError, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Matrix;

/// Largest dimension covered by the embedded direction numbers.
pub const MAX_DIM: usize = 64;
/// Output variance below which the estimate is flagged degenerate.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;
const BITS: usize = 32;

/// Primitive polynomial (with leading and trailing bits) and initial
/// direction integers `m_1..m_s` for each dimension.
#[rustfmt::skip]
const DIRECTIONS: [(u32, &[u32]); MAX_DIM] = [
    (1, &[1]),
    (3, &[1]),
    (7, &[1, 3]),
    (11, &[1, 3, 1]),
    (13, &[1, 1, 1]),
    (19, &[1, 1, 3, 3]),
    (25, &[1, 3, 5, 13]),
    (37, &[1, 1, 5, 5, 17]),
    (41, &[1, 1, 5, 5, 5]),
    (47, &[1, 1, 7, 11, 19]),
    (55, &[1, 1, 5, 1, 1]),
    (59, &[1, 1, 1, 3, 11]),
    (61, &[1, 3, 5, 5, 31]),
    (67, &[1, 3, 3, 9, 7, 49]),
    (91, &[1, 1, 1, 15, 21, 21]),
    (97, &[1, 3, 1, 13, 27, 49]),
    (103, &[1, 1, 1, 15, 7, 5]),
    (109, &[1, 3, 1, 15, 13, 25]),
    (115, &[1, 1, 5, 5, 19, 61]),
    (131, &[1, 3, 7, 11, 23, 15, 103]),
    (137, &[1, 3, 7, 13, 13, 15, 69]),
    (143, &[1, 1, 3, 13, 7, 35, 63]),
    (145, &[1, 3, 5, 9, 1, 25, 53]),
    (157, &[1, 3, 1, 13, 9, 35, 107]),
    (167, &[1, 3, 1, 5, 27, 61, 31]),
    (171, &[1, 1, 5, 11, 19, 41, 61]),
    (185, &[1, 3, 5, 3, 3, 13, 69]),
    (191, &[1, 1, 7, 13, 1, 19, 1]),
    (193, &[1, 3, 7, 5, 13, 19, 59]),
    (203, &[1, 1, 3, 9, 25, 29, 41]),
    (211, &[1, 3, 5, 13, 23, 1, 55]),
    (213, &[1, 3, 7, 3, 13, 59, 17]),
    (229, &[1, 3, 1, 3, 5, 53, 69]),
    (239, &[1, 1, 5, 5, 23, 33, 13]),
    (241, &[1, 1, 7, 7, 1, 61, 123]),
    (247, &[1, 1, 7, 9, 13, 61, 49]),
    (253, &[1, 3, 3, 5, 3, 55, 33]),
    (285, &[1, 3, 1, 15, 31, 13, 49, 245]),
    (299, &[1, 3, 5, 15, 31, 59, 63, 97]),
    (301, &[1, 3, 1, 11, 11, 11, 77, 249]),
    (333, &[1, 3, 1, 11, 27, 43, 71, 9]),
    (351, &[1, 1, 7, 15, 21, 11, 81, 45]),
    (355, &[1, 3, 7, 3, 25, 31, 65, 79]),
    (357, &[1, 3, 1, 1, 19, 11, 3, 205]),
    (361, &[1, 1, 5, 9, 19, 21, 29, 157]),
    (369, &[1, 3, 7, 11, 1, 33, 89, 185]),
    (391, &[1, 3, 3, 3, 15, 9, 79, 71]),
    (397, &[1, 3, 7, 11, 15, 39, 119, 27]),
    (425, &[1, 1, 3, 1, 11, 31, 97, 225]),
    (451, &[1, 1, 1, 3, 23, 43, 57, 177]),
    (463, &[1, 3, 7, 7, 17, 17, 37, 71]),
    (487, &[1, 3, 1, 5, 27, 63, 123, 213]),
    (501, &[1, 1, 3, 5, 11, 43, 53, 133]),
    (529, &[1, 3, 5, 5, 29, 17, 47, 173, 479]),
    (539, &[1, 3, 3, 11, 3, 1, 109, 9, 69]),
    (545, &[1, 1, 1, 5, 17, 39, 23, 5, 343]),
    (557, &[1, 3, 1, 5, 25, 15, 31, 103, 499]),
    (563, &[1, 1, 1, 11, 11, 17, 63, 105, 183]),
    (601, &[1, 1, 5, 11, 9, 29, 97, 231, 363]),
    (607, &[1, 1, 5, 15, 19, 45, 41, 7, 383]),
    (617, &[1, 3, 7, 7, 31, 19, 83, 137, 221]),
    (623, &[1, 1, 1, 3, 23, 15, 111, 223, 83]),
    (631, &[1, 1, 5, 13, 31, 15, 55, 25, 161]),
    (637, &[1, 1, 3, 13, 25, 47, 39, 87, 257]),
];

fn direction_vectors(dim: usize) -> [u32; BITS] {
    let (poly, init) = DIRECTIONS[dim];
    let mut v = [0u32; BITS];
    let degree = (u32::BITS - poly.leading_zeros() - 1) as usize;
    if degree == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (BITS - 1 - k);
        }
        return v;
    }
    for k in 0..degree {
        v[k] = init[k] << (BITS - 1 - k);
    }
    let inner = (poly >> 1) & ((1 << (degree - 1)) - 1);
    for i in degree..BITS {
        let mut next = v[i - degree] ^ (v[i - degree] >> degree);
        for k in 1..degree {
            if (inner >> (degree - 1 - k)) & 1 == 1 {
                next ^= v[i - k];
            }
        }
        v[i] = next;
    }
    v
}

/// First `n` points of the `dim`-dimensional Sobol' sequence in Gray-code
/// order, skipping the origin so every coordinate lies in `(0, 1)`.
pub fn sobol_sequence(dim: usize, n: usize) -> Result<Matrix> {
    if dim > MAX_DIM {
        return Err(CraftError::Unsupported(format!(
            "Sobol' dimension {dim} exceeds the embedded table ({MAX_DIM})"
        )));
    }
    if n as u64 >= 1u64 << BITS {
        return Err(CraftError::arg(format!("at most 2^{BITS} - 1 Sobol' points, got {n}")));
    }
    let dirs: Vec<[u32; BITS]> = (0..dim).map(direction_vectors).collect();
    let scale = 1.0 / (1u64 << BITS) as f64;
    let mut state = vec![0u32; dim];
    let mut out = Matrix::zeros(n, dim);
    for i in 1..=n {
        let c = (i - 1).trailing_ones() as usize;
        for (d, x) in state.iter_mut().enumerate() {
            *x ^= dirs[d][c];
        }
        for (o, &x) in out.row_mut(i - 1).iter_mut().zip(&state) {
            *o = x as f64 * scale;
        }
    }
    Ok(out)
}

/// Inpainting perturbation `u ⊙ m + (1 − m) µ`.
pub fn perturb(u: &[f64], mask: &[f64], mu: f64) -> Vec<f64> {
    u.iter().zip(mask).map(|(&x, &m)| x * m + (1.0 - m) * mu).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobolSequence {
    JoeKuo,
    Uniform(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskDesign {
    A,
    B,
    /// `A` with column `i` taken from `B`.
    AB(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    pub masks: Matrix,
    pub design: MaskDesign,
    pub sequence: SobolSequence,
}

/// Builds the pick-freeze designs `A`, `B`, `AB(0)`, …, `AB(r−1)` with `n`
/// rows each from one `2r`-dimensional block.
pub fn pick_freeze_designs(r: usize, n: usize, sequence: SobolSequence) -> Result<Vec<MaskBatch>> {
    if r == 0 {
        return Err(CraftError::arg("at least one input is required"));
    }
    let block = match sequence {
        SobolSequence::JoeKuo => sobol_sequence(2 * r, n)?,
        SobolSequence::Uniform(seed) => {
            let mut rng = Rng::new(seed, streams::MASKS);
            Matrix::from_fn(n, 2 * r, |_, _| rng.uniform())
        }
    };
    let a = Matrix::from_fn(n, r, |i, j| block[(i, j)]);
    let b = Matrix::from_fn(n, r, |i, j| block[(i, r + j)]);
    let batch = |masks, design| MaskBatch {
        masks,
        design,
        sequence,
    };
    let mut out = Vec::with_capacity(r + 2);
    for k in 0..r {
        let mut ab = a.clone();
        ab.set_col(k, &b.col(k));
        out.push(batch(ab, MaskDesign::AB(k)));
    }
    out.insert(0, batch(b, MaskDesign::B));
    out.insert(0, batch(a, MaskDesign::A));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SobolEstimate {
    pub total_indices: Vec<f64>,
    pub variance_y: f64,
    pub n_samples: usize,
    pub degenerate: bool,
}

/// Evaluations of `f` on every design, in design order.
struct Evaluations {
    a: Vec<f64>,
    b: Vec<f64>,
    ab: Vec<Vec<f64>>,
}

fn evaluate<F>(f: &F, r: usize, n: usize, sequence: SobolSequence) -> Result<Evaluations>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if n < 2 {
        return Err(CraftError::arg(format!("need at least 2 samples, got {n}")));
    }
    let designs = pick_freeze_designs(r, n, sequence)?;
    let points: Vec<&[f64]> = designs.iter().flat_map(|d| d.masks.row_iter()).collect();
    let ys: Vec<f64> = points.par_iter().map(|m| f(m)).collect();
    if let Some(k) = ys.iter().position(|y| !y.is_finite()) {
        return Err(CraftError::Data(format!(
            "output function returned {} at evaluation {k}",
            ys[k]
        )));
    }
    let mut chunks = ys.chunks(n).map(<[f64]>::to_vec);
    let a = chunks.next().expect("A design");
    let b = chunks.next().expect("B design");
    Ok(Evaluations { a, b, ab: chunks.collect() })
}

fn pooled_variance(a: &[f64], b: &[f64]) -> f64 {
    let count = (a.len() + b.len()) as f64;
    let mean = a.iter().chain(b).sum::<f64>() / count;
    a.iter().chain(b).map(|y| (y - mean) * (y - mean)).sum::<f64>() / count
}

/// Jansen estimator of the total Sobol indices of `f` on `[0,1]^r` with `n`
/// base samples (`n·(r+2)` evaluations of `f`).
pub fn total_sobol_jansen<F>(f: F, r: usize, n: usize, sequence: SobolSequence) -> Result<SobolEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let ev = evaluate(&f, r, n, sequence)?;
    let variance_y = pooled_variance(&ev.a, &ev.b);
    if variance_y < DEGENERATE_VARIANCE {
        return Ok(SobolEstimate {
            total_indices: vec![0.0; r],
            variance_y,
            n_samples: n,
            degenerate: true,
        });
    }
    let total_indices = ev
        .ab
        .iter()
        .map(|ab| {
            let sq: f64 = ev.a.iter().zip(ab).map(|(x, y)| (x - y) * (x - y)).sum();
            sq / (2.0 * n as f64) / variance_y
        })
        .collect();
    Ok(SobolEstimate {
        total_indices,
        variance_y,
        n_samples: n,
        degenerate: false,
    })
}

/// Saltelli first-order indices on the same design, kept as a cross-check of
/// the total-index estimator on additive functions.
pub fn first_order_saltelli<F>(f: F, r: usize, n: usize, sequence: SobolSequence) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let ev = evaluate(&f, r, n, sequence)?;
    let variance_y = pooled_variance(&ev.a, &ev.b);
    if variance_y < DEGENERATE_VARIANCE {
        return Ok(vec![0.0; r]);
    }
    Ok(ev
        .ab
        .iter()
        .map(|ab| {
            let s: f64 = ev.b.iter().zip(ab).zip(&ev.a).map(|((yb, yab), ya)| yb * (yab - ya)).sum();
            s / n as f64 / variance_y
        })
        .collect())
}

/// Class-level importance: total indices of the map
/// `M ↦ mean_i head(τ(U_i, M) Wᵀ)`.
pub fn concept_importance<H>(
    u: &Matrix,
    w: &Matrix,
    head: H,
    n_samples: usize,
    mu: f64,
    sequence: SobolSequence,
) -> Result<SobolEstimate>
where
    H: Fn(&[f64]) -> f64 + Sync,
{
    let r = u.cols();
    if w.cols() != r {
        return Err(CraftError::arg(format!(
            "U has {r} concepts but W has {} columns",
            w.cols()
        )));
    }
    if u.rows() == 0 {
        return Err(CraftError::arg("U has no rows"));
    }
    let p = w.rows();
    let rows = u.rows() as f64;
    let output = |mask: &[f64]| {
        let mut activation = vec![0.0; p];
        let mut total = 0.0;
        for row in u.row_iter() {
            let coeffs = perturb(row, mask, mu);
            for (k, a) in activation.iter_mut().enumerate() {
                *a = w.row(k).iter().zip(&coeffs).map(|(x, c)| x * c).sum();
            }
            total += head(&activation);
        }
        total / rows
    };
    total_sobol_jansen(output, r, n_samples, sequence)
}

/// Single-sample importance, for diagnostics on one image or crop.
pub fn concept_importance_row<H>(
    u_row: &[f64],
    w: &Matrix,
    head: H,
    n_samples: usize,
    mu: f64,
    sequence: SobolSequence,
) -> Result<SobolEstimate>
where
    H: Fn(&[f64]) -> f64 + Sync,
{
    let u = Matrix::new(1, u_row.len(), u_row.to_vec())?;
    concept_importance(&u, w, head, n_samples, mu, sequence)
}

/// Fraction of rows whose directional derivative along each concept is positive.
pub fn tcav_importance(grads: &Matrix, w: &Matrix) -> Result<Vec<f64>> {
    if grads.cols() != w.rows() {
        return Err(CraftError::arg(format!(
            "gradients have {} columns but W has {} rows",
            grads.cols(),
            w.rows()
        )));
    }
    if grads.rows() == 0 {
        return Ok(vec![0.0; w.cols()]);
    }
    let derivs = grads.matmul(w);
    let n = grads.rows() as f64;
    Ok((0..w.cols())
        .map(|j| derivs.col(j).iter().filter(|&&d| d > 0.0).count() as f64 / n)
        .collect())
}
