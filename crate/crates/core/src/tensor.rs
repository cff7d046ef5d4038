//! Dense row-major containers shared by every stage of the pipeline.

use std::ops::{Index, IndexMut};

use crate::error::{CraftError, Result};

/// Dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CraftError::arg(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CraftError::arg("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix still has rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in orow.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Matrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn col_norms(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    pub fn mean_row(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Batch of images, `batch × height × width × channels`, row-major with channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(CraftError::arg(format!(
                "tensor {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    /// Per-image shape `(height, width, channels)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.dims[1], self.dims[2], self.dims[3])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, h: usize, w: usize, c: usize) -> usize {
        ((b * self.dims[1] + h) * self.dims[2] + w) * self.dims[3] + c
    }

    #[inline]
    pub fn get(&self, b: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.offset(b, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, h: usize, w: usize, c: usize, v: f64) {
        let o = self.offset(b, h, w, c);
        self.data[o] = v;
    }

    fn image_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn image_data(&self, b: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn image_data_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.image_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Copy of a single image as a batch of one.
    pub fn image(&self, b: usize) -> Tensor4 {
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.image_data(b).to_vec(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Tensor4 {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &b in idx {
            data.extend_from_slice(self.image_data(b));
        }
        Tensor4 {
            dims: [idx.len(), self.dims[1], self.dims[2], self.dims[3]],
            data,
        }
    }

    /// Concatenates batches of identical image shape.
    pub fn stack(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts.first().ok_or_else(|| CraftError::arg("nothing to stack"))?;
        let shape = first.image_shape();
        if parts.iter().any(|p| p.image_shape() != shape) {
            return Err(CraftError::arg("cannot stack tensors of different image shapes"));
        }
        let batch = parts.iter().map(Tensor4::batch).sum();
        let mut data = Vec::with_capacity(batch * first.image_len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            dims: [batch, shape.0, shape.1, shape.2],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
        assert_eq!(self.dims, other.dims, "zip_map shape mismatch");
        Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mean over all spatial positions; output is `batch × channels`.
pub fn global_average_pool(t: &Tensor4) -> Matrix {
    let [b, h, w, c] = t.dims();
    assert!(h * w >= 1, "global_average_pool needs a non-empty spatial map");
    let mut out = Matrix::zeros(b, c);
    let inv = 1.0 / (h * w) as f64;
    for bi in 0..b {
        let img = t.image_data(bi);
        let row = out.row_mut(bi);
        for px in img.chunks_exact(c) {
            for (o, v) in row.iter_mut().zip(px) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}
