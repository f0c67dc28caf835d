use std::fmt;

use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
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
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows. Returns `None` on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Option<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return None;
            }
            data.extend_from_slice(r);
        }
        Some(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar {:?}", self.shape());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks rows of several tensors with equal column counts.
    pub fn vstack(parts: &[&Tensor], cols: usize) -> Tensor {
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch: {} vs {}", p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Tensor { rows, cols, data }
    }

    /// Plain product, no tape.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(
            1.0,
            MatRef::new(self),
            MatRef::new(other),
            0.0,
            MatMut::new(&mut out),
        );
        out
    }
}

/// Strided read-only view used by the gemm wrapper.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            offset: 0,
            rows: t.rows,
            cols: t.cols,
            rs: t.cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Column block `[start, start + width)` of a row-major matrix.
    pub fn col_block(t: &'a Tensor, start: usize, width: usize) -> Self {
        Self {
            data: &t.data,
            offset: start,
            rows: t.rows,
            cols: width,
            rs: t.cols as isize,
            cs: 1,
        }
    }

    /// Row block `[start, start + height)` of a row-major matrix.
    pub fn row_block(t: &'a Tensor, start: usize, height: usize) -> Self {
        Self {
            data: &t.data,
            offset: start * t.cols,
            rows: height,
            cols: t.cols,
            rs: t.cols as isize,
            cs: 1,
        }
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatMut<'a> {
    pub fn new(t: &'a mut Tensor) -> Self {
        Self {
            rows: t.rows,
            cols: t.cols,
            rs: t.cols as isize,
            cs: 1,
            offset: 0,
            data: &mut t.data,
        }
    }

    pub fn col_block(t: &'a mut Tensor, start: usize, width: usize) -> Self {
        Self {
            rows: t.rows,
            cols: width,
            rs: t.cols as isize,
            cs: 1,
            offset: start,
            data: &mut t.data,
        }
    }

    pub fn row_block(t: &'a mut Tensor, start: usize, height: usize) -> Self {
        Self {
            rows: height,
            cols: t.cols,
            rs: t.cols as isize,
            cs: 1,
            offset: start * t.cols,
            data: &mut t.data,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(a.rows, c.rows);
    assert_eq!(b.cols, c.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply handles k == 0 by scaling c with beta
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    let idx = c.offset as isize + i as isize * c.rs + j as isize * c.cs;
                    c.data[idx as usize] = 0.0;
                }
            }
        }
        return;
    }
    // Bounds of the strided views, checked before handing raw pointers over.
    let last = |off: usize, r: usize, cc: usize, rs: isize, cs: isize| -> isize {
        off as isize + (r as isize - 1) * rs + (cc as isize - 1) * cs
    };
    assert!((last(a.offset, m, k, a.rs, a.cs) as usize) < a.data.len());
    assert!((last(b.offset, k, n, b.rs, b.cs) as usize) < b.data.len());
    assert!((last(c.offset, m, n, c.rs, c.cs) as usize) < c.data.len());
    // SAFETY: all three views were bounds-checked above; strides are positive and
    // `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            c.cs,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.transpose().transpose(), t);
        assert_eq!(t.transpose().row(0), &[1.0, 4.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_none());
    }

    #[test]
    fn gemm_with_transposed_views() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(2, 3, vec![1., 0., 1., 0., 1., 0.]);
        let mut c = Tensor::zeros(2, 2);
        gemm(1.0, MatRef::new(&a), MatRef::new(&b).t(), 0.0, MatMut::new(&mut c));
        assert_eq!(c.data(), &[4.0, 2.0, 10.0, 5.0]);
    }

    #[test]
    fn empty_inner_dimension_gives_zeros() {
        let a = Tensor::zeros(2, 0);
        let b = Tensor::zeros(0, 3);
        assert_eq!(a.matmul(&b), Tensor::zeros(2, 3));
    }
}
