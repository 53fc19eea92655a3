//! Row-major dense matrix with the handful of operations the crate needs:
//! products, Cholesky factorization of SPD matrices, and a closed-form
//! symmetric 2x2 eigendecomposition.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::dim("from_rows: empty"));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("from_rows: ragged rows"));
        }
        Ok(Mat { rows: r, cols: c, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim(format!(
                "matvec: {}x{} times vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            y[i] = acc;
        }
        Ok(y)
    }

    /// y = A^T x
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::dim(format!(
                "tr_matvec: {}x{} transposed times vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let xi = x[i];
            for j in 0..self.cols {
                y[j] += row[j] * xi;
            }
        }
        Ok(y)
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// A^T A, the Gram matrix of the columns.
    pub fn gram(&self) -> Mat {
        let n = self.cols;
        let mut g = Mat::zeros(n, n);
        for i in 0..self.rows {
            let row = self.row(i);
            for a in 0..n {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..n {
                    g.data[a * n + b] += ra * row[b];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                g.data[a * n + b] = g.data[b * n + a];
            }
        }
        g
    }

    pub fn add_diag(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix.
///
/// Fails if the matrix is not square or not positive definite; success is the
/// crate's working test for positive definiteness.
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    pub fn new(a: &Mat) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::dim("cholesky: matrix not square"));
        }
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a.get(i, j);
                for k in 0..j {
                    sum -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::Instability(format!(
                            "cholesky: pivot {sum:.3e} at index {i}, matrix not positive definite"
                        )));
                    }
                    l.set(i, j, sum.sqrt());
                } else {
                    l.set(i, j, sum / l.get(j, j));
                }
            }
        }
        Ok(Cholesky { l })
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.l.rows;
        if b.len() != n {
            return Err(Error::dim("cholesky solve: rhs length"));
        }
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l.get(i, k) * y[k];
            }
            y[i] /= self.l.get(i, i);
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= self.l.get(k, i) * y[k];
            }
            y[i] /= self.l.get(i, i);
        }
        Ok(y)
    }

    pub fn inverse(&self) -> Result<Mat> {
        let n = self.l.rows;
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e)?;
            e[j] = 0.0;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        Ok(inv)
    }

    pub fn log_det(&self) -> f64 {
        let n = self.l.rows;
        2.0 * (0..n).map(|i| self.l.get(i, i).ln()).sum::<f64>()
    }
}

/// Eigendecomposition of a symmetric 2x2 matrix `[[a, b], [b, c]]`.
///
/// Returns `(values, vectors)` with values ascending and vectors as unit
/// columns, so `M = V diag(values) V^T`.
pub fn sym_eigen_2x2(a: f64, b: f64, c: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let mean = 0.5 * (a + c);
    let half_gap = 0.5 * (a - c);
    let radius = (half_gap * half_gap + b * b).sqrt();
    let lo = mean - radius;
    let hi = mean + radius;
    if radius < 1e-300 || b == 0.0 {
        // Already diagonal; order by value.
        return if a <= c {
            ([a, c], [[1.0, 0.0], [0.0, 1.0]])
        } else {
            ([c, a], [[0.0, 1.0], [1.0, 0.0]])
        };
    }
    // Eigenvector for hi: (b, hi - a), normalized; lo's is its perpendicular.
    let v = [b, hi - a];
    let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let v_hi = [v[0] / norm, v[1] / norm];
    let v_lo = [-v_hi[1], v_hi[0]];
    ([lo, hi], [[v_lo[0], v_hi[0]], [v_lo[1], v_hi[1]]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree_with_hand_values() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(a.matvec(&[1.0, -1.0]).unwrap(), vec![-1.0, -1.0, -1.0]);
        assert_eq!(a.tr_matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-4.0, -4.0]);
    }

    #[test]
    fn matvec_rejects_bad_length() {
        let a = Mat::zeros(2, 3);
        assert!(a.matvec(&[0.0; 2]).is_err());
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Mat::from_rows(&[
            vec![4.0, 2.0, 0.6],
            vec![2.0, 5.0, 1.0],
            vec![0.6, 1.0, 3.0],
        ])
        .unwrap();
        let chol = Cholesky::new(&a).unwrap();
        let x = chol.solve(&[1.0, 2.0, 3.0]).unwrap();
        let back = a.matvec(&x).unwrap();
        for (bi, want) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((bi - want).abs() < 1e-12, "residual {}", bi - want);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(Cholesky::new(&a).is_err());
    }

    #[test]
    fn gram_matches_matmul() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let g = a.gram();
        assert_eq!(g.get(0, 0), 35.0);
        assert_eq!(g.get(0, 1), 44.0);
        assert_eq!(g.get(1, 0), 44.0);
        assert_eq!(g.get(1, 1), 56.0);
    }

    #[test]
    fn eigen_2x2_reconstructs() {
        let (a, b, c) = (2.0, 0.7, 1.1);
        let (vals, vecs) = sym_eigen_2x2(a, b, c);
        assert!(vals[0] <= vals[1]);
        // M = V diag V^T
        let m00 = vecs[0][0] * vecs[0][0] * vals[0] + vecs[0][1] * vecs[0][1] * vals[1];
        let m01 = vecs[0][0] * vecs[1][0] * vals[0] + vecs[0][1] * vecs[1][1] * vals[1];
        let m11 = vecs[1][0] * vecs[1][0] * vals[0] + vecs[1][1] * vecs[1][1] * vals[1];
        assert!((m00 - a).abs() < 1e-12);
        assert!((m01 - b).abs() < 1e-12);
        assert!((m11 - c).abs() < 1e-12);
    }
}
