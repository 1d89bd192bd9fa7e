//! Dense rank-2 tensors, row-major. Plain values only; gradient tracking
//! lives in [`crate::tape`].

use crate::error::{err, Result};
use crate::real::Real;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: R) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(err!(
                Dim,
                "data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    /// Single-row tensor from a slice.
    pub fn row_vector(values: &[R]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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
    pub fn data(&self) -> &[R] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// The only scalar a 1x1 tensor holds.
    pub fn item(&self) -> Result<R> {
        if self.rows != 1 || self.cols != 1 {
            return Err(err!(Dim, "item() on a {}x{} tensor", self.rows, self.cols));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Tensor<R> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor<R> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Frobenius norm.
    pub fn norm(&self) -> R {
        self.data
            .iter()
            .fold(R::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    /// Cast elementwise through f64.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| S::from_f64(x.into_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<R>) -> R {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(R::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. These are the only inner loops in the crate; the tape's
// forward and backward passes are built from them.
// ---------------------------------------------------------------------------

/// c = a . b
///
/// Column-tiled so a register-resident accumulator strip survives the whole
/// inner-product loop; same summation order as the naive triple loop.
pub fn matmul_nn<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    debug_assert_eq!(a.cols, b.rows);
    const TILE: usize = 32;
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![R::zero(); n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        let mut j0 = 0;
        while j0 < m {
            let w = TILE.min(m - j0);
            let mut acc = [R::zero(); TILE];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b.data[p * m + j0..p * m + j0 + w];
                for (o, &bv) in acc[..w].iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
            orow[j0..j0 + w].copy_from_slice(&acc[..w]);
            j0 += w;
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

/// c = a . b^T. Runs through an explicit transpose so the inner kernel has
/// independent accumulators (the dot-product form defeats vectorization).
pub fn matmul_nt<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    debug_assert_eq!(a.cols, b.cols);
    let bt = b.transpose();
    matmul_nn(a, &bt)
}

/// c = a^T . b
pub fn matmul_tn<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    debug_assert_eq!(a.rows, b.rows);
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![R::zero(); n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

/// y += alpha * x
pub fn axpy<R: Real>(alpha: R, x: &Tensor<R>, y: &mut Tensor<R>) {
    debug_assert_eq!(x.shape(), y.shape());
    for (yo, &xv) in y.data.iter_mut().zip(&x.data) {
        *yo = *yo + alpha * xv;
    }
}

pub fn add<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    }
}

pub fn sub<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x - y).collect(),
    }
}
