//! Dense row-major f64 matrices. The three matmul variants are thin wrappers
//! over `matrixmultiply::dgemm`; everything else is plain loops.

/// A dense 2-D tensor. Vectors are `[n, 1]` columns, scalars `[1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/value count mismatch");
        Self { rows, cols, data }
    }

    pub fn from_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.to_vec())
    }

    /// Column vector from a slice.
    pub fn column(data: &[f64]) -> Self {
        Self::from_slice(data.len(), 1, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        Tensor {
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

    /// `self [n,k] * b [k,m] -> [n,m]`.
    pub fn matmul_nn(&self, b: &Tensor) -> Tensor {
        assert_eq!(self.cols, b.rows, "matmul_nn shape mismatch");
        let mut out = Tensor::zeros(self.rows, b.cols);
        gemm(
            self.rows, self.cols, b.cols,
            self.data.as_ptr(), self.cols as isize, 1,
            b.data.as_ptr(), b.cols as isize, 1,
            &mut out,
        );
        out
    }

    /// `self [n,k] * b^T` with `b [m,k]` -> `[n,m]`.
    pub fn matmul_nt(&self, b: &Tensor) -> Tensor {
        assert_eq!(self.cols, b.cols, "matmul_nt shape mismatch");
        let mut out = Tensor::zeros(self.rows, b.rows);
        gemm(
            self.rows, self.cols, b.rows,
            self.data.as_ptr(), self.cols as isize, 1,
            b.data.as_ptr(), 1, b.cols as isize,
            &mut out,
        );
        out
    }

    /// `self^T * b` with `self [k,n]`, `b [k,m]` -> `[n,m]`.
    pub fn matmul_tn(&self, b: &Tensor) -> Tensor {
        assert_eq!(self.rows, b.rows, "matmul_tn shape mismatch");
        let mut out = Tensor::zeros(self.cols, b.cols);
        gemm(
            self.cols, self.rows, b.cols,
            self.data.as_ptr(), 1, self.cols as isize,
            b.data.as_ptr(), b.cols as isize, 1,
            &mut out,
        );
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize, k: usize, n: usize,
    a: *const f64, rsa: isize, csa: isize,
    b: *const f64, rsb: isize, csb: isize,
    out: &mut Tensor,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a, rsa, csa,
            b, rsb, csb,
            0.0,
            out.data.as_mut_ptr(), n as isize, 1,
        );
    }
}
