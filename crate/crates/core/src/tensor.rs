//! Dense row-major matrices and the scalar types they hold.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type. Training runs in `f32`; gradient audits use `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = a · b` for an `m×k` by `k×n` product with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping storage.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, S::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length does not match {rows}x{cols}"
        );
        Tensor { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn scalar(value: S) -> Self {
        Self::filled(1, 1, value)
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
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The only entry of a 1×1 tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
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

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape changes element count");
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul(&self, other: &Self, transpose_a: bool, transpose_b: bool) -> Self {
        let (m, k) = if transpose_a {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (k2, n) = if transpose_b {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        assert_eq!(
            k, k2,
            "matmul inner dimensions differ: {:?}{} x {:?}{}",
            self.shape(),
            if transpose_a { "ᵀ" } else { "" },
            other.shape(),
            if transpose_b { "ᵀ" } else { "" }
        );
        let mut out = Tensor::zeros(m, n);
        if m == 0 || n == 0 {
            return out;
        }
        let (rsa, csa) = if transpose_a {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        };
        let (rsb, csb) = if transpose_b {
            (1, other.cols as isize)
        } else {
            (other.cols as isize, 1)
        };
        // SAFETY: strides index within the row-major buffers of `self`, `other`
        // and the freshly allocated `out`, whose shapes were checked above.
        unsafe {
            S::gemm(
                m,
                k,
                n,
                self.data.as_ptr(),
                rsa,
                csa,
                other.data.as_ptr(),
                rsb,
                csb,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| T::of(x.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }
}
