//! Dense row-major matrices, the skew-symmetric parameterization of the
//! orthogonal layer, the matrix exponential and its Fréchet derivative.

use std::ops::{Index, IndexMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{numeric, structural, Result};

/// Scaled 1-norm targeted by the squaring phase of [`mat_exp`].
const SCALED_NORM_TARGET: f64 = 0.5;
/// Upper bound on Taylor terms; at norm 0.5 convergence needs about 18.
const MAX_TAYLOR_TERMS: usize = 40;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(structural(format!(
                "matrix data has {} values, expected {rows}x{cols}",
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(structural(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
        // chunks_exact(0) panics; an empty-column matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(structural(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(structural(format!(
                "matmul_nt shape mismatch: {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(structural(format!(
                "matmul_tn shape mismatch: {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(structural(format!(
                "add shape mismatch: {:?} + {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| {
                (0..self.rows)
                    .map(|i| self.data[i * self.cols + j].abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Copies the `rows x cols` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(r0 + i)[c0..c0 + cols]);
        }
        out
    }

    fn set_block(&mut self, r0: usize, c0: usize, src: &Matrix) {
        for i in 0..src.rows {
            let cols = self.cols;
            self.data[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + src.cols]
                .copy_from_slice(src.row(i));
        }
    }

    /// `self · v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(structural(format!(
                "vector length {} does not match {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Strictly-lower-triangular entries of a skew-symmetric `dim x dim`
/// matrix, packed row-major: `(1,0), (2,0), (2,1), (3,0), ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewParams {
    dim: usize,
    values: Vec<f64>,
}

impl SkewParams {
    pub fn param_count(dim: usize) -> usize {
        dim * dim.saturating_sub(1) / 2
    }

    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != Self::param_count(dim) {
            return Err(structural(format!(
                "skew parameters for dim {dim} need {} values, got {}",
                Self::param_count(dim),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(numeric("non-finite skew parameter"));
        }
        Ok(Self { dim, values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; Self::param_count(dim)],
        }
    }

    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Self {
        let values = (0..Self::param_count(dim))
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self { dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Packed index of entry `(i, j)` with `i > j`.
    pub fn index_of(i: usize, j: usize) -> usize {
        debug_assert!(i > j);
        i * (i - 1) / 2 + j
    }
}

/// Expands packed parameters into the antisymmetric matrix `A`.
pub fn skew_from_params(p: &SkewParams) -> Result<Matrix> {
    let d = p.dim;
    if p.values.len() != SkewParams::param_count(d) {
        return Err(structural(format!(
            "skew parameters for dim {d} need {} values, got {}",
            SkewParams::param_count(d),
            p.values.len()
        )));
    }
    let mut a = Matrix::zeros(d, d);
    let mut k = 0;
    for i in 1..d {
        for j in 0..i {
            let v = p.values[k];
            a[(i, j)] = v;
            a[(j, i)] = -v;
            k += 1;
        }
    }
    Ok(a)
}

/// Matrix exponential by scaling and squaring around a Taylor core.
///
/// The input is scaled by `2^-s` so its 1-norm is at most 0.5, the series
/// is summed until the next term is below machine precision relative to the
/// partial sum, and the result is squared `s` times.
pub fn mat_exp(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(structural(format!(
            "matrix exponential needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    if !a.is_finite() {
        return Err(numeric("matrix exponential input has non-finite entries"));
    }
    let n = a.rows;
    let norm = a.norm_1();
    let squarings = if norm > SCALED_NORM_TARGET {
        (norm / SCALED_NORM_TARGET).log2().ceil() as i32
    } else {
        0
    };
    let mut x = a.clone();
    x.scale(0.5f64.powi(squarings));

    let mut result = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=MAX_TAYLOR_TERMS {
        term = term.matmul(&x)?;
        term.scale(1.0 / k as f64);
        result.add_assign(&term)?;
        if term.max_abs() <= f64::EPSILON * 0.25 * result.max_abs() {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    if !result.is_finite() {
        return Err(numeric("matrix exponential overflowed"));
    }
    Ok(result)
}

/// Fréchet derivative `L(A, E) = d/dt exp(A + tE)` at `t = 0`.
///
/// Read off the upper-right block of `exp([[A, E], [0, A]])`.
pub fn frechet_exp(a: &Matrix, e: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.shape() != e.shape() {
        return Err(structural(format!(
            "Fréchet derivative needs equal square matrices, got {:?} and {:?}",
            a.shape(),
            e.shape()
        )));
    }
    let n = a.rows;
    let mut big = Matrix::zeros(2 * n, 2 * n);
    big.set_block(0, 0, a);
    big.set_block(0, n, e);
    big.set_block(n, n, a);
    let expd = mat_exp(&big)?;
    Ok(expd.block(0, n, n, n))
}

/// `max |QᵀQ − I|` over all entries.
pub fn orthogonality_defect(q: &Matrix) -> Result<f64> {
    if !q.is_square() {
        return Err(structural(format!(
            "orthogonality defect needs a square matrix, got {:?}",
            q.shape()
        )));
    }
    let qtq = q.matmul_tn(q)?;
    let mut worst: f64 = 0.0;
    for i in 0..q.rows {
        for j in 0..q.rows {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((qtq[(i, j)] - target).abs());
        }
    }
    Ok(worst)
}

/// Pulls a gradient with respect to `Q = exp(A)` back to the packed skew
/// parameters of `A`.
///
/// Uses the adjoint identity `∂L/∂A = L(Aᵀ, ∂L/∂Q)`; each packed entry
/// `p_ij` appears as `+p` at `(i, j)` and `−p` at `(j, i)`.
pub fn skew_param_grad(params: &SkewParams, grad_q: &Matrix) -> Result<Vec<f64>> {
    let a = skew_from_params(params)?;
    if grad_q.shape() != a.shape() {
        return Err(structural(format!(
            "gradient shape {:?} does not match skew dim {}",
            grad_q.shape(),
            params.dim
        )));
    }
    let grad_a = frechet_exp(&a.transpose(), grad_q)?;
    let d = params.dim;
    let mut out = Vec::with_capacity(SkewParams::param_count(d));
    for i in 1..d {
        for j in 0..i {
            out.push(grad_a[(i, j)] - grad_a[(j, i)]);
        }
    }
    Ok(out)
}
