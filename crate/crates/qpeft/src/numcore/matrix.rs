use crate::error::{Error, Result};
use crate::numcore::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim(format!(
                "from_vec: {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Build from nested rows; handy in tests.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dim("from_rows: ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// `self * b`.
    pub fn matmul(&self, b: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != b.rows {
            return Err(Error::Dim(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![S::zero(); m * n];
        // i-k-j loop order: the inner j loop runs over contiguous rows of
        // `b` and `out`, which vectorizes well.
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &b.data[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * bv;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self * b^T`.
    pub fn matmul_nt(&self, b: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != b.cols {
            return Err(Error::Dim(format!(
                "matmul_nt: {}x{} * ({}x{})^T",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, b.rows);
        let mut out = vec![S::zero(); m * n];
        // Dot products of contiguous rows.
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&av, &bv) in arow.iter().zip(brow.iter()) {
                    acc += av * bv;
                }
                *o = acc;
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self^T * b`.
    pub fn matmul_tn(&self, b: &Matrix<S>) -> Result<Matrix<S>> {
        if self.rows != b.rows {
            return Err(Error::Dim(format!(
                "matmul_tn: ({}x{})^T * {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let (m, k, n) = (self.cols, self.rows, b.cols);
        let mut out = vec![S::zero(); m * n];
        // Accumulate rank-1 updates row by row; inner loops stay contiguous.
        for kk in 0..k {
            let arow = &self.data[kk * m..(kk + 1) * m];
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, b: &Matrix<S>) -> Result<Matrix<S>> {
        self.zip_with(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix<S>) -> Result<Matrix<S>> {
        self.zip_with(b, "sub", |x, y| x - y)
    }

    pub fn scale(&self, a: S) -> Matrix<S> {
        self.map(|x| x * a)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += a * b`, in place.
    pub fn add_assign_scaled(&mut self, b: &Matrix<S>, a: S) -> Result<()> {
        if self.shape() != b.shape() {
            return Err(Error::Dim(format!(
                "add_assign_scaled: {:?} vs {:?}",
                self.shape(),
                b.shape()
            )));
        }
        for (x, &y) in self.data.iter_mut().zip(b.data.iter()) {
            *x += a * y;
        }
        Ok(())
    }

    fn zip_with(&self, b: &Matrix<S>, what: &str, f: impl Fn(S, S) -> S) -> Result<Matrix<S>> {
        if self.shape() != b.shape() {
            return Err(Error::Dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                b.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(b.data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frob_norm(&self) -> S {
        let mut acc = S::zero();
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Largest absolute element-wise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, b: &Matrix<S>) -> Result<S> {
        if self.shape() != b.shape() {
            return Err(Error::Dim(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape(),
                b.shape()
            )));
        }
        let mut worst = S::zero();
        for (&x, &y) in self.data.iter().zip(b.data.iter()) {
            let d = (x - y).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_by_hand() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![7.0, 8.0, 9.0], vec![10.0, 11.0, 12.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        let want =
            Matrix::from_rows(&[vec![27.0, 30.0, 33.0], vec![61.0, 68.0, 75.0], vec![95.0, 106.0, 117.0]])
                .unwrap();
        assert_eq!(c, want);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let mut rng = crate::numcore::rng::DetRng::new(7);
        let a: Matrix<f64> = rng.normal_matrix(4, 3, 1.0);
        let b: Matrix<f64> = rng.normal_matrix(5, 3, 1.0);
        let nt = a.matmul_nt(&b).unwrap();
        let explicit = a.matmul(&b.transpose()).unwrap();
        assert!(nt.max_abs_diff(&explicit).unwrap() < 1e-12);

        let c: Matrix<f64> = rng.normal_matrix(4, 6, 1.0);
        let tn = a.matmul_tn(&c).unwrap();
        let explicit = a.transpose().matmul(&c).unwrap();
        assert!(tn.max_abs_diff(&explicit).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a: Matrix<f64> = Matrix::zeros(2, 3);
        let b: Matrix<f64> = Matrix::zeros(4, 2);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = crate::numcore::rng::DetRng::new(3);
        let a: Matrix<f64> = rng.normal_matrix(3, 5, 1.0);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut a: Matrix<f64> = Matrix::zeros(2, 2);
        a.set(1, 0, f64::NAN);
        assert!(a.check_finite("test").is_err());
    }
}
