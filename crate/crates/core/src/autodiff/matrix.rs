use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn row(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    /// Stacks equally sized rows. An empty slice yields a `0 x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_acc(self, rhs, &mut out);
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out += op(a) * op(b)` where `a` and `b` are read through row/column
/// strides, so transposes need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, out: &mut Matrix) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides address only elements of `a`, `b` and `out`, whose
    // shapes were checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// `out += a * b`.
pub(crate) fn matmul_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert_eq!((a.cols, out.shape()), (b.rows, (a.rows, b.cols)));
    gemm_acc(a.rows, a.cols, b.cols, &a.data, a.cols as isize, 1, &b.data, b.cols as isize, 1, out);
}

/// `out += a^T * b`.
pub(crate) fn matmul_tn_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert_eq!((a.rows, out.shape()), (b.rows, (a.cols, b.cols)));
    gemm_acc(a.cols, a.rows, b.cols, &a.data, 1, a.cols as isize, &b.data, b.cols as isize, 1, out);
}

/// `out += a * b^T`.
pub(crate) fn matmul_nt_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert_eq!((a.cols, out.shape()), (b.cols, (a.rows, b.rows)));
    gemm_acc(a.rows, a.cols, b.rows, &a.data, a.cols as isize, 1, &b.data, 1, b.cols as isize, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let ab = a.matmul(&b);
        assert_eq!(ab.as_slice(), &[58.0, 64.0, 139.0, 154.0]);

        let mut tn = Matrix::zeros(2, 2);
        matmul_tn_acc(&a.transpose(), &b, &mut tn);
        assert_eq!(tn, ab);

        let mut nt = Matrix::zeros(2, 2);
        matmul_nt_acc(&a, &b.transpose(), &mut nt);
        assert_eq!(nt, ab);
    }
}
