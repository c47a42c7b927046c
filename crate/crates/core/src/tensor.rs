//! Dense row-major `f64` tensors and the raw kernels shared by the tape and
//! the tape-free attention paths.

use std::fmt;

use crate::par;

/// Scores at or below this value are treated as masked (probability exactly 0).
pub const MASK_THRESHOLD: f64 = -1e29;
/// Additive sentinel used for masked attention scores.
pub const MASK_SENTINEL: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {found} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("{op}: index {index} out of range for extent {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::DimensionMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Width of the innermost axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.last_dim() + j]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                found: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, p) = self.dims2("matmul")?;
        let (p2, q) = other.dims2("matmul")?;
        if p != p2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * q];
        matmul_into(&self.data, &other.data, m, p, q, &mut out);
        Tensor::new(vec![m, q], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, p) = self.dims2("matmul_nt")?;
        let (q, p2) = other.dims2("matmul_nt")?;
        if p != p2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * q];
        matmul_nt_into(&self.data, &other.data, m, p, q, &mut out);
        Tensor::new(vec![m, q], out)
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + width > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor::new(vec![r, width], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major integer matrix used to index score gathers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl IndexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(TensorError::DataLength {
                shape: vec![rows, cols],
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> usize) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn max_value(&self) -> Option<usize> {
        self.data.iter().copied().max()
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. Each output row is produced by one fixed loop order, so the
// parallel and sequential paths agree bit for bit.

/// `out = a[m×p] · b[p×q]` (overwrites `out`).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, p: usize, q: usize, out: &mut [f64]) {
    let big = m * p * q >= par::MATMUL_PAR_THRESHOLD;
    par::for_each_row(out, q, big, |i, row| {
        row.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a[i * p..(i + 1) * p];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * q..(kk + 1) * q];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
}

/// `out = a[m×p] · b[q×p]ᵀ`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, p: usize, q: usize, out: &mut [f64]) {
    let big = m * p * q >= par::MATMUL_PAR_THRESHOLD;
    par::for_each_row(out, q, big, |i, row| {
        let arow = &a[i * p..(i + 1) * p];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, &b[j * p..(j + 1) * p]);
        }
    });
}

/// `out += a[m×p]ᵀ · g[m×q]`, giving a `p×q` result.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, p: usize, q: usize, out: &mut [f64]) {
    let big = m * p * q >= par::MATMUL_PAR_THRESHOLD;
    par::for_each_row(out, q, big, |kk, row| {
        for i in 0..m {
            let aik = a[i * p + kk];
            if aik == 0.0 {
                continue;
            }
            let grow = &g[i * q..(i + 1) * q];
            for (o, &gv) in row.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    });
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-wise softmax with sentinel masking. Entries `<= MASK_THRESHOLD` get
/// probability exactly zero.
pub(crate) fn softmax_rows_into(x: &[f64], cols: usize, out: &mut [f64]) -> Result<()> {
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let max = xr
            .iter()
            .copied()
            .filter(|&v| v > MASK_THRESHOLD)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TensorError::DegenerateRow { row: r });
        }
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = if v > MASK_THRESHOLD {
                (v - max).exp()
            } else {
                0.0
            };
            sum += *o;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
    Ok(())
}
