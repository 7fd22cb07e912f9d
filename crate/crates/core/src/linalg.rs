//! Dense row-major matrices with the norm and projection primitives used by
//! the adapter, optimizer and diagnostic layers.
//!
//! Everything here is pure and deterministic: matmul uses a fixed i-k-j loop
//! order so repeated calls agree bitwise across runs and platforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 2-D array of f64 in row-major order.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Convenience constructor for tests and hand-set cases.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Standard matrix product, fixed i-k-j summation order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape_str(), rhs.shape_str()));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let lv = self.data[i * k + kk];
                if lv == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += lv * rrow[j];
                }
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_nt", self.shape_str(), rhs.shape_str()));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lrow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let rrow = &rhs.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += lrow[kk] * rrow[kk];
                }
                orow[j] = acc;
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape("matmul_tn", self.shape_str(), rhs.shape_str()));
        }
        let (m, k, n) = (self.cols, self.rows, rhs.cols);
        let mut out = vec![0.0; m * n];
        for kk in 0..k {
            let lrow = &self.data[kk * m..(kk + 1) * m];
            let rrow = &rhs.data[kk * n..(kk + 1) * n];
            for i in 0..m {
                let lv = lrow[i];
                if lv == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += lv * rrow[j];
                }
            }
        }
        Ok(Matrix { rows: m, cols: n, data: out })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add", self.shape_str(), rhs.shape_str()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("sub", self.shape_str(), rhs.shape_str()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// `self += c * rhs`, shapes must match.
    pub fn axpy(&mut self, c: f64, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("axpy", self.shape_str(), rhs.shape_str()));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Square root of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

/// Frobenius norm of a low-rank product `B * A` without materializing it,
/// via trace((B^T B)(A A^T)). Cost is O(r^2 (m + n)) instead of O(m n r).
pub fn product_frobenius_norm(b: &Matrix, a: &Matrix) -> Result<f64> {
    if b.cols() != a.rows() {
        return Err(Error::shape("product_frobenius_norm", b.shape_str(), a.shape_str()));
    }
    let gb = b.matmul_tn(b)?; // r x r
    let ga = a.matmul_nt(a)?; // r x r
    let r = gb.rows();
    let mut acc = 0.0;
    for i in 0..r {
        for j in 0..r {
            acc += gb.get(i, j) * ga.get(j, i);
        }
    }
    // tiny negative values can appear from cancellation
    Ok(acc.max(0.0).sqrt())
}

/// Orthonormal basis for the column space of `m`, by modified Gram-Schmidt
/// with one re-orthogonalization pass. Columns whose orthogonalized norm
/// falls below `1e-12` times the leading column norm are discarded, so a
/// rank-deficient input (e.g. an all-zero B at step 0) yields a thinner, or
/// empty, basis rather than NaNs.
pub fn orthonormal_basis(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let lead = (0..cols)
        .map(|j| (0..rows).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt())
        .fold(0.0_f64, f64::max);
    let mut q: Vec<Vec<f64>> = Vec::new();
    if lead == 0.0 {
        return Matrix::zeros(rows, 0);
    }
    let tol = 1e-12 * lead;
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| m.get(i, j)).collect();
        for _ in 0..2 {
            for qcol in &q {
                let dot: f64 = v.iter().zip(qcol).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(qcol) {
                    *vi -= dot * qi;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > tol {
            for vi in &mut v {
                *vi /= norm;
            }
            q.push(v);
        }
    }
    let rank = q.len();
    let mut out = Matrix::zeros(rows, rank);
    for (j, qcol) in q.iter().enumerate() {
        for i in 0..rows {
            out.set(i, j, qcol[i]);
        }
    }
    out
}

/// Frobenius norm of `m` minus its orthogonal projection onto the column
/// space of `basis`. Rank-deficient bases are handled by the tolerance in
/// [`orthonormal_basis`].
pub fn column_space_residual(m: &Matrix, basis: &Matrix) -> Result<f64> {
    if m.rows() != basis.rows() {
        return Err(Error::shape("column_space_residual", m.shape_str(), basis.shape_str()));
    }
    let q = orthonormal_basis(basis);
    if q.cols() == 0 {
        return Ok(m.frobenius_norm());
    }
    let coeffs = q.matmul_tn(m)?; // r x n
    let proj = q.matmul(&coeffs)?; // rows x n
    Ok(m.sub(&proj)?.frobenius_norm())
}

/// Residual of the row space of `m` outside Row(basis).
pub fn row_space_residual(m: &Matrix, basis: &Matrix) -> Result<f64> {
    column_space_residual(&m.transpose(), &basis.transpose())
}

/// Seeded, stream-separated random source. Identical `(seed, stream)` pairs
/// produce identical draw sequences across runs and platforms.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { rng, seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh stream with the same seed and a different stream id.
    pub fn substream(&self, stream: u64) -> RngStream {
        RngStream::new(self.seed, stream)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Matrix of i.i.d. zero-mean Gaussian entries with the given stddev.
pub fn seeded_gaussian(rows: usize, cols: usize, rng: &mut RngStream, stddev: f64) -> Matrix {
    assert!(stddev >= 0.0, "stddev must be non-negative");
    if stddev == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let dist = Normal::new(0.0, stddev).expect("valid normal parameters");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix { rows, cols, data }
}
