use std::fmt;

use crate::error::{invalid, shape, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{})", self.rows, self.cols)
    }
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a tensor, checking the length and that every entry is finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Wraps a buffer without the finiteness scan; used on hot paths where
    /// the caller produced the values itself.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor2D { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
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
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2D::zeros(self.rows, other.cols);
        gemm(
            1.0,
            self.into(),
            false,
            other.into(),
            false,
            0.0,
            (&mut out).into(),
        );
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Stacks rows of several tensors with identical column counts.
    pub fn vstack(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        let cols = parts.first().map_or(0, |t| t.cols);
        if parts.iter().any(|t| t.cols != cols) {
            return Err(shape("vstack column mismatch"));
        }
        let rows = parts.iter().map(|t| t.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor2D::from_raw(rows, cols, data))
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor2D {
        Tensor2D::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }
}

/// Borrowed row-major matrix view with an explicit row stride, so column
/// blocks (attention heads) can be addressed without copying.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            ld: cols,
        }
    }

    /// Columns `start..start + width` of a `rows × total_cols` buffer.
    pub fn cols_of(
        data: &'a [f64],
        rows: usize,
        total_cols: usize,
        start: usize,
        width: usize,
    ) -> Self {
        debug_assert!(start + width <= total_cols);
        debug_assert!(data.len() >= rows * total_cols);
        MatRef {
            data: &data[start..],
            rows,
            cols: width,
            ld: total_cols,
        }
    }
}

impl<'a> From<&'a Tensor2D> for MatRef<'a> {
    fn from(t: &'a Tensor2D) -> Self {
        MatRef::new(&t.data, t.rows, t.cols)
    }
}

/// Mutable counterpart of [`MatRef`].
pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatMut {
            data,
            rows,
            cols,
            ld: cols,
        }
    }

    pub fn cols_of(
        data: &'a mut [f64],
        rows: usize,
        total_cols: usize,
        start: usize,
        width: usize,
    ) -> Self {
        debug_assert!(start + width <= total_cols);
        MatMut {
            data: &mut data[start..],
            rows,
            cols: width,
            ld: total_cols,
        }
    }
}

impl<'a> From<&'a mut Tensor2D> for MatMut<'a> {
    fn from(t: &'a mut Tensor2D) -> Self {
        MatMut::new(&mut t.data, t.rows, t.cols)
    }
}

/// `c = alpha · op(a) · op(b) + beta · c` where `op` optionally transposes.
pub fn gemm(
    alpha: f64,
    a: MatRef<'_>,
    trans_a: bool,
    b: MatRef<'_>,
    trans_b: bool,
    beta: f64,
    c: MatMut<'_>,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, ld: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * ld + cols
        }
    };
    assert!(a.data.len() >= extent(a.rows, a.cols, a.ld));
    assert!(b.data.len() >= extent(b.rows, b.cols, b.ld));
    assert!(c.data.len() >= extent(c.rows, c.cols, c.ld));
    if k == 0 {
        for r in 0..m {
            c.data[r * c.ld..r * c.ld + n]
                .iter_mut()
                .for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.ld as isize)
    } else {
        (a.ld as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.ld as isize)
    } else {
        (b.ld as isize, 1)
    };
    // SAFETY: the extent checks above guarantee every strided access stays
    // inside the borrowed slices, and `c` is a unique borrow distinct from `a`, `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.ld as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns the unit vector along `v`, or `None` for a zero/non-finite norm.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}
