//! Dense row-major `f64` matrices and the handful of kernels the models need.
//!
//! Every reduction runs in a fixed index order, so identical operands always
//! produce identical bits. In particular each output row of [`matmul`] and of
//! the attention kernels depends only on the corresponding input row (plus the
//! shared right-hand operand), which is what lets incremental decoding
//! reproduce a full forward pass exactly.

use std::fmt;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PsmError, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "{:?}", &self.row(r)[..self.cols.min(6)])?;
        }
        if self.rows > 6 {
            write!(f, " ..")?;
        }
        write!(f, "]")
    }
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PsmError::dim(
                "Matrix::from_vec",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(PsmError::dim("vstack", self.cols, other.cols));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn push_row(&mut self, row: &[f64]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols, "push_row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Bitwise equality, so `-0.0 != 0.0` and `NaN == NaN` with equal payloads.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Normwise relative error `max|self - reference| / max|reference|`.
    pub fn rel_err(&self, reference: &Matrix) -> f64 {
        let diff = self.max_abs_diff(reference);
        if diff == 0.0 {
            return 0.0;
        }
        diff / reference.max_abs().max(f64::MIN_POSITIVE)
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(PsmError::dim(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `e^(-x)` per entry.
    pub fn exp_neg(&self) -> Matrix {
        self.map(|v| (-v).exp())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
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
}

/// A non-empty dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(PsmError::dim("Vector::new", "len > 0", 0));
        }
        Ok(Self(data))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn as_column(&self) -> Matrix {
        Matrix::column(&self.0)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Left-to-right dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `a × b`. Element `(i, j)` accumulates `a[i,k] * b[k,j]` for ascending `k`
/// starting from `0.0`, the same sequence a naive triple loop performs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(PsmError::dim(
            "matmul",
            format!("lhs cols = rhs rows ({})", b.rows),
            a.cols,
        ));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Softmax of `scores[..len]` written into `out[..len]`, max-subtracted.
pub(crate) fn softmax_prefix(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is exactly 0.
pub fn softmax_rows(m: &Matrix, causal: bool) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let allowed = if causal { (r + 1).min(m.cols) } else { m.cols };
        if allowed == 0 {
            return Err(PsmError::AllMasked { row: r });
        }
        softmax_prefix(&m.row(r)[..allowed], &mut out.row_mut(r)[..allowed]);
    }
    Ok(out)
}

/// One query row attending over key/value rows `0..len`, reading columns
/// `col0..col0 + query.len()` of the keys and `col0..col0 + out.len()` of the
/// values (one head of a multi-head layout).
///
/// Shared by the full and the incremental attention paths so both produce the
/// same bits.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row(
    query: &[f64],
    keys: &Matrix,
    values: &Matrix,
    col0: usize,
    len: usize,
    scale: f64,
    scores: &mut Vec<f64>,
    out: &mut [f64],
) {
    let (kw, vw) = (query.len(), out.len());
    scores.clear();
    for j in 0..len {
        scores.push(dot(query, &keys.row(j)[col0..col0 + kw]) * scale);
    }
    let mut weights = vec![0.0; len];
    softmax_prefix(scores, &mut weights);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&values.row(j)[col0..col0 + vw]) {
            *o += w * v;
        }
    }
}

/// Single-head causal attention `softmax(q kᵀ / √head_dim) v` with row `i`
/// attending to key rows `0..=i`.
pub fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, head_dim: usize) -> Result<Matrix> {
    if q.cols != head_dim || k.cols != head_dim {
        return Err(PsmError::dim(
            "causal_attention",
            format!("q/k width {head_dim}"),
            format!("q {} / k {}", q.cols, k.cols),
        ));
    }
    if k.rows != v.rows {
        return Err(PsmError::dim("causal_attention", k.rows, v.rows));
    }
    if q.rows > k.rows {
        return Err(PsmError::dim(
            "causal_attention",
            format!("at most {} query rows", k.rows),
            q.rows,
        ));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut scores = Vec::with_capacity(k.rows);
    for i in 0..q.rows {
        attend_row(q.row(i), k, v, 0, i + 1, scale, &mut scores, out.row_mut(i));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub enum Elementwise<'a> {
    Add(&'a Matrix, &'a Matrix),
    Hadamard(&'a Matrix, &'a Matrix),
    Scale(&'a Matrix, f64),
    ExpNeg(&'a Matrix),
}

pub fn elementwise(op: Elementwise<'_>) -> Result<Matrix> {
    match op {
        Elementwise::Add(a, b) => a.add(b),
        Elementwise::Hadamard(a, b) => a.hadamard(b),
        Elementwise::Scale(a, s) => Ok(a.scale(s)),
        Elementwise::ExpNeg(a) => Ok(a.exp_neg()),
    }
}

/// Deterministic pseudo-random matrix with entries uniform in `[-scale, scale)`.
///
/// Uses the ChaCha8 stream cipher generator seeded with `seed`; each entry
/// takes the top 53 bits of one `u64` draw, so the result is identical on
/// every platform.
pub fn seeded_init(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            (2.0 * unit - 1.0) * scale
        })
        .collect();
    Matrix { rows, cols, data }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
