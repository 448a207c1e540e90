//! Dense row-major `f64` matrices and the exact kernels the rest of the crate
//! builds on.
//!
//! Every kernel uses a fixed summation order (ascending over the contraction
//! index), so repeated runs on one platform produce bit-identical results.
//! Parallelism is only applied across independent output rows, which leaves
//! the per-element order untouched.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Multiply-add count above which `matmul` fans rows out across threads.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// Dense 2-D matrix of 64-bit floats in row-major order.
///
/// Values are immutable after construction and cheap to clone at desk scale.
/// Public constructors reject non-finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: i / cols,
                    col: i % cols,
                    value: v,
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    /// The identity matrix `E_n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major view of the underlying storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_rowvec(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_rowvec",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: bias.rows,
                right_cols: bias.cols,
            });
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.cols) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * factor).collect();
        Matrix::from_raw(self.rows, self.cols, data)
    }

    /// Matrix product with a fixed per-element summation order (ascending k).
    ///
    /// Large products are parallelized across output rows; every element still
    /// sees the same sequential reduction, so the bits do not depend on the
    /// thread count.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let (m, inner, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        let kernel = |i: usize, out_row: &mut [f64]| {
            let a_row = &self.data[i * inner..(i + 1) * inner];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        };
        if m * inner * n >= PAR_FLOP_THRESHOLD {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| kernel(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                kernel(i, row);
            }
        }
        Ok(Matrix::from_raw(m, n, out))
    }

    /// Frobenius norm: square root of the sum of squared entries.
    ///
    /// The accumulation order is canonical under transposition (square
    /// matrices pair `(i,j)` with `(j,i)`; rectangular ones traverse the
    /// short axis outermost), so `a.frobenius_norm()` equals
    /// `a.transpose().frobenius_norm()` bit for bit.
    pub fn frobenius_norm(&self) -> f64 {
        let (rows, cols) = (self.rows, self.cols);
        let at = |r: usize, c: usize| self.data[r * cols + c];
        let mut sum = 0.0;
        if rows == cols {
            for i in 0..rows {
                sum += at(i, i) * at(i, i);
                for j in (i + 1)..cols {
                    // x*x + y*y is commutative in IEEE arithmetic, so the
                    // transpose accumulates the identical sequence.
                    sum += at(i, j) * at(i, j) + at(j, i) * at(j, i);
                }
            }
        } else if rows < cols {
            for r in 0..rows {
                for c in 0..cols {
                    sum += at(r, c) * at(r, c);
                }
            }
        } else {
            for c in 0..cols {
                for r in 0..rows {
                    sum += at(r, c) * at(r, c);
                }
            }
        }
        sum.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Inverse via LU factorization with partial pivoting, solved against the
    /// identity column by column.
    ///
    /// A pivot whose magnitude falls below `1e-12 * max|a|` reports the matrix
    /// as singular, carrying the offending elimination step.
    pub fn inverse(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                op: "inverse",
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let threshold = 1e-12 * self.max_abs();
        let mut lu = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();

        for k in 0..n {
            // Partial pivoting: largest magnitude in column k; ties keep the
            // lowest row index so the factorization is deterministic.
            let mut pivot_row = k;
            let mut pivot_val = lu[k * n + k].abs();
            for r in (k + 1)..n {
                let v = lu[r * n + k].abs();
                if v > pivot_val {
                    pivot_val = v;
                    pivot_row = r;
                }
            }
            if pivot_val < threshold || pivot_val == 0.0 {
                return Err(Error::Singular {
                    index: k,
                    pivot: lu[pivot_row * n + k],
                    threshold,
                });
            }
            if pivot_row != k {
                for c in 0..n {
                    lu.swap(k * n + c, pivot_row * n + c);
                }
                perm.swap(k, pivot_row);
            }
            let pivot = lu[k * n + k];
            for r in (k + 1)..n {
                let factor = lu[r * n + k] / pivot;
                lu[r * n + k] = factor;
                for c in (k + 1)..n {
                    lu[r * n + c] -= factor * lu[k * n + c];
                }
            }
        }

        // Solve L U x = P e_j for each identity column.
        let mut inv = vec![0.0; n * n];
        let mut y = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                let mut s = if perm[i] == j { 1.0 } else { 0.0 };
                for c in 0..i {
                    s -= lu[i * n + c] * y[c];
                }
                y[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for c in (i + 1)..n {
                    s -= lu[i * n + c] * inv[c * n + j];
                }
                inv[i * n + j] = s / lu[i * n + i];
            }
        }
        Ok(Matrix::from_raw(n, n, inv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;
    use proptest::prelude::*;

    pub(crate) fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-scale, scale)).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = Rng::new(11);
        let a = random_matrix(&mut rng, 3, 5, 1.0);
        let e = Matrix::identity(5);
        assert_eq!(a.matmul(&e).unwrap(), a);
        let z = Matrix::zeros(5, 4);
        let az = a.matmul(&z).unwrap();
        assert!(az.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_parallel_path_matches_serial_bits() {
        // 80^3 exceeds the threshold, so this exercises the rayon path.
        let mut rng = Rng::new(5);
        let a = random_matrix(&mut rng, 80, 80, 1.0);
        let b = random_matrix(&mut rng, 80, 80, 1.0);
        let big = a.matmul(&b).unwrap();
        let mut serial = vec![0.0; 80 * 80];
        for i in 0..80 {
            for k in 0..80 {
                let aik = a.get(i, k);
                for j in 0..80 {
                    serial[i * 80 + j] += aik * b.get(k, j);
                }
            }
        }
        assert_eq!(big.data(), &serial[..]);
    }

    #[test]
    fn matmul_associative_on_seeded_triples() {
        let mut rng = Rng::new(99);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 6, 1.0);
            let b = random_matrix(&mut rng, 6, 3, 1.0);
            let c = random_matrix(&mut rng, 3, 5, 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let err = left.sub(&right).unwrap().frobenius_norm() / right.frobenius_norm().max(1e-12);
            assert!(err <= 1e-9, "associativity error {err}");
        }
    }

    #[test]
    fn inverse_identity_and_diagonal() {
        let e = Matrix::identity(3);
        assert_eq!(e.inverse().unwrap(), e);
        let d = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let inv = d.inverse().unwrap();
        assert_eq!(inv.data(), &[0.5, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn inverse_rank_one_is_singular() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        match a.inverse() {
            Err(Error::Singular { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singularity error, got {other:?}"),
        }
    }

    #[test]
    fn inverse_residual_bound() {
        let mut rng = Rng::new(3);
        for n in [2usize, 5, 16, 64] {
            // Diagonally dominant seeds keep the condition number low.
            let mut a = random_matrix(&mut rng, n, n, 1.0);
            for i in 0..n {
                let v = a.get(i, i) + n as f64;
                a.data_mut()[i * n + i] = v;
            }
            let inv = a.inverse().unwrap();
            let resid = a
                .matmul(&inv)
                .unwrap()
                .sub(&Matrix::identity(n))
                .unwrap()
                .frobenius_norm();
            assert!(resid <= 1e-10 * n as f64, "n={n} residual {resid}");
        }
    }

    #[test]
    fn inverse_involution_on_well_conditioned() {
        let mut rng = Rng::new(17);
        for _ in 0..10 {
            let n = 6;
            let mut a = random_matrix(&mut rng, n, n, 1.0);
            for i in 0..n {
                let v = a.get(i, i) + n as f64;
                a.data_mut()[i * n + i] = v;
            }
            let back = a.inverse().unwrap().inverse().unwrap();
            let rel = a.sub(&back).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel <= 1e-8, "double inverse error {rel}");
        }
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(Matrix::identity(2).frobenius_norm(), 2.0_f64.sqrt());
        let m = Matrix::from_vec(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.frobenius_norm(), 5.0);
        assert_eq!(Matrix::zeros(3, 3).frobenius_norm(), 0.0);
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]),
            Err(Error::DataLength { .. })
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            Matrix::from_vec(0, 2, vec![]),
            Err(Error::InvalidDimensions { .. })
        ));
    }

    proptest! {
        #[test]
        fn frobenius_norm_transpose_exact(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let m = random_matrix(&mut rng, rows, cols, 10.0);
            prop_assert_eq!(m.frobenius_norm().to_bits(), m.transpose().frobenius_norm().to_bits());
        }

        #[test]
        fn transpose_is_involutive(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let m = random_matrix(&mut rng, rows, cols, 10.0);
            prop_assert_eq!(m.transpose().transpose(), m);
        }
    }
}
