//! Dense row-major `f64` matrices and the handful of kernels the encoder needs.
//!
//! Every kernel here is a plain function over [`Matrix`] values. The autodiff
//! tape calls the same functions for its forward values, so evaluation with or
//! without a tape produces bitwise-identical numbers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major matrix. Vectors are `1 × n` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row_vector(vec![value])
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 × 1` matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(what()))
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check(a.cols == b.rows, || {
        format!("matmul {:?} x {:?}", a.shape(), b.shape())
    })?;
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check(a.cols == b.cols, || {
        format!("matmul_nt {:?} x {:?}ᵀ", a.shape(), b.shape())
    })?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check(a.rows == b.rows, || {
        format!("matmul_tn {:?}ᵀ x {:?}", a.shape(), b.shape())
    })?;
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check(a.shape() == b.shape(), || {
        format!("add {:?} + {:?}", a.shape(), b.shape())
    })?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Adds a `1 × n` bias to every row of `a`.
pub fn add_row(a: &Matrix, bias: &Matrix) -> Result<Matrix> {
    check(bias.rows == 1 && bias.cols == a.cols, || {
        format!("add_row {:?} + {:?}", a.shape(), bias.shape())
    })?;
    let mut out = a.clone();
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Row-wise softmax of `logits + mask`. Rows are max-shifted before
/// exponentiation, so a finite blocking sentinel underflows to exactly zero.
pub fn masked_softmax(logits: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
    if let Some(m) = mask {
        check(m.shape() == logits.shape(), || {
            format!("mask {:?} vs logits {:?}", m.shape(), logits.shape())
        })?;
    }
    let mut out = logits.clone();
    if let Some(m) = mask {
        out.add_assign(m);
    }
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and bias (`1 × n` each).
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<Matrix> {
    check(
        gain.shape() == (1, x.cols) && bias.shape() == (1, x.cols),
        || format!("layer_norm {:?} with gain {:?}", x.shape(), gain.shape()),
    )?;
    let n = x.cols as f64;
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * gain.data[c] + bias.data[c];
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let inner = GELU_C * (v + 0.044715 * v * v * v);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
}

/// Gathers rows of `table` by index.
pub fn gather_rows(table: &Matrix, ids: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros(ids.len(), table.cols);
    for (i, &id) in ids.iter().enumerate() {
        check(id < table.rows, || {
            format!("row {id} out of range for {} rows", table.rows)
        })?;
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub fn slice_cols(x: &Matrix, start: usize, end: usize) -> Matrix {
    let width = end - start;
    let mut out = Matrix::zeros(x.rows, width);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
    }
    out
}

pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts.first().map_or(0, |p| p.rows);
    check(parts.iter().all(|p| p.rows == rows), || {
        "concat_cols row mismatch".into()
    })?;
    let cols = parts.iter().map(|p| p.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut offset = 0;
        for p in parts {
            out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
            offset += p.cols;
        }
    }
    Ok(out)
}
