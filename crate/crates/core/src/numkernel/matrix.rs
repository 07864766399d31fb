use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Whether an operand of [`gemm`] is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Shape,
            "buffer of length {} cannot hold a {}x{} matrix",
            data.len(),
            rows,
            cols
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == cols), Shape, "ragged rows");
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure!(
            self.shape() == other.shape(),
            Shape,
            "cannot add {:?} to {:?}",
            other.shape(),
            self.shape()
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Dense product `op(a) * op(b)` in the scalar's native precision.
pub fn gemm<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, ta: Transpose, tb: Transpose) -> Result<Matrix<T>> {
    let (m, ka) = match ta {
        Transpose::No => a.shape(),
        Transpose::Yes => (a.cols, a.rows),
    };
    let (kb, n) = match tb {
        Transpose::No => b.shape(),
        Transpose::Yes => (b.cols, b.rows),
    };
    ensure!(
        ka == kb,
        Shape,
        "gemm inner dimensions disagree: op(a) is {}x{}, op(b) is {}x{}",
        m,
        ka,
        kb,
        n
    );
    let mut out = Matrix::zeros(m, n);
    gemm_into(a, b, ta, tb, &mut out);
    Ok(out)
}

/// Accumulates `op(a) * op(b)` into `out`. Shapes must already agree.
pub(crate) fn gemm_into<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, ta: Transpose, tb: Transpose, out: &mut Matrix<T>) {
    let (m, n) = out.shape();
    let k = match ta {
        Transpose::No => a.cols,
        Transpose::Yes => a.rows,
    };
    match (ta, tb) {
        (Transpose::No, Transpose::No) => {
            for i in 0..m {
                let arow = a.row(i);
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    if aip == T::zero() {
                        continue;
                    }
                    for (o, &bpj) in orow.iter_mut().zip(b.row(p)) {
                        *o += aip * bpj;
                    }
                }
            }
        }
        (Transpose::No, Transpose::Yes) => {
            for i in 0..m {
                let arow = a.row(i);
                for j in 0..n {
                    out.data[i * n + j] += dot(arow, b.row(j));
                }
            }
        }
        (Transpose::Yes, Transpose::No) => {
            for p in 0..k {
                let arow = a.row(p);
                let brow = b.row(p);
                for (i, &api) in arow.iter().enumerate() {
                    if api == T::zero() {
                        continue;
                    }
                    let orow = &mut out.data[i * n..(i + 1) * n];
                    for (o, &bpj) in orow.iter_mut().zip(brow) {
                        *o += api * bpj;
                    }
                }
            }
        }
        (Transpose::Yes, Transpose::Yes) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[(p, i)] * b[(j, p)];
                    }
                    out.data[i * n + j] += acc;
                }
            }
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
