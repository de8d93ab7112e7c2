//! Dense row-major linear algebra in `f64`.
//!
//! Only what the rest of the crate needs: matrix products (backed by the
//! `matrixmultiply` GEMM kernels), Cholesky factorization of symmetric
//! positive-definite matrices and Gaussian log-densities built on it.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Relative tolerance under which a matrix counts as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A real vector. Dereferences to `[f64]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("matrix contains non-finite entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// Stacks equally sized slices as the rows of a matrix.
    pub fn stack_rows<'a, I>(cols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            if r.len() != cols {
                return shape_err(format!("row {n} has dim {}, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
            n += 1;
        }
        Ok(Matrix {
            rows: n,
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
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, false)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return shape_err(format!(
                "matvec: matrix is {}x{}, vector has dim {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok(self
            .row_iter()
            .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect::<Vec<_>>()
            .into())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += s · x xᵀ`.
    pub fn add_outer(&mut self, s: f64, x: &[f64]) {
        debug_assert_eq!(self.shape(), (x.len(), x.len()));
        for (i, &xi) in x.iter().enumerate() {
            let sx = s * xi;
            for (c, &xj) in self.row_mut(i).iter_mut().zip(x) {
                *c += sx * xj;
            }
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|S_ij − S_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// `(S + Sᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    pub fn add_diag(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `op(a) · op(b)` where `op` optionally transposes.
pub fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool) -> Result<Matrix> {
    let (m, k, rsa, csa) = if trans_a {
        (a.cols, a.rows, 1, a.cols)
    } else {
        (a.rows, a.cols, a.cols, 1)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.cols, b.rows, 1, b.cols)
    } else {
        (b.rows, b.cols, b.cols, 1)
    };
    if k != kb {
        return shape_err(format!(
            "matmul inner dimensions disagree: {m}x{k} · {kb}x{n}"
        ));
    }
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    // SAFETY: the dimensions and strides above describe exactly the buffers of
    // `a`, `b` and `c`, which are live and non-overlapping for the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = S`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(s: &Matrix) -> Result<Self> {
        cholesky_spd(s).map(|l| Cholesky { l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// `ln det S = 2 Σ ln L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = self.l.row(i);
            let mut acc = b[i];
            for j in 0..i {
                acc -= row[j] * y[j];
            }
            y[i] = acc / row[i];
        }
        y
    }

    /// Solves `Lᵀ x = y` by back substitution.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in i + 1..n {
                acc -= self.l[(j, i)] * x[j];
            }
            x[i] = acc / self.l[(i, i)];
        }
        x
    }

    /// Solves `S x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `S⁻¹`, column by column.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for (i, v) in col.into_iter().enumerate() {
                inv[(i, j)] = v;
            }
        }
        inv.symmetrized()
    }

    /// `dᵀ S⁻¹ d`.
    pub fn quad_form(&self, d: &[f64]) -> f64 {
        self.solve_lower(d).iter().map(|v| v * v).sum()
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Inputs are symmetrized as `(S + Sᵀ)/2` first; asymmetry beyond
/// [`SYMMETRY_TOL`] is logged.
pub fn cholesky_spd(s: &Matrix) -> Result<Matrix> {
    if s.rows != s.cols {
        return shape_err(format!("cholesky of non-square {}x{}", s.rows, s.cols));
    }
    let asym = s.asymmetry();
    if asym > SYMMETRY_TOL {
        log::warn!("cholesky input asymmetric (relative {asym:e}); symmetrizing");
    }
    let s = s.symmetrized();
    let n = s.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// A multivariate normal with its covariance already factored.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vector,
    chol: Cholesky,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vector, cov: &Matrix) -> Result<Self> {
        if cov.rows() != mean.dim() || cov.cols() != mean.dim() {
            return shape_err(format!(
                "gaussian: mean dim {} vs covariance {:?}",
                mean.dim(),
                cov.shape()
            ));
        }
        let chol = Cholesky::factor(cov)?;
        let d = mean.dim() as f64;
        let log_norm = -0.5 * (d * (2.0 * PI).ln() + chol.log_det());
        Ok(Gaussian {
            mean,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return shape_err(format!(
                "gaussian: point dim {} vs model dim {}",
                x.len(),
                self.dim()
            ));
        }
        let diff: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        Ok(self.log_norm - 0.5 * self.chol.quad_form(&diff))
    }
}

/// `ln N(x; mu, S)`, computed through the Cholesky factor of `S`.
pub fn gaussian_logpdf(x: &[f64], mu: &[f64], s: &Matrix) -> Result<f64> {
    if x.len() != mu.len() {
        return shape_err(format!(
            "gaussian_logpdf: x dim {} vs mu dim {}",
            x.len(),
            mu.len()
        ));
    }
    Gaussian::new(Vector::from(mu), s)?.log_pdf(x)
}
