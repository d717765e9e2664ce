//! Dense 2-D kernels with hand-written reverse-mode derivatives.
//!
//! Every forward kernel here has a matching `*_backward` that maps an
//! upstream gradient with respect to the output onto a gradient with respect
//! to the input. The pipeline composes these by hand; there is no tape.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon added to the variance inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Default step for [`central_diff_gradient`].
pub const FD_STEP: f64 = 1e-5;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Mat::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Mat::from_vec".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Mat::from_rows", "ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Seeded Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no data anyway.
        self.data
            .chunks_exact(self.cols.max(1))
            .take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        self.check_same_shape(other, op)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Mat) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_row_broadcast(&self, bias: &Mat) -> Result<Mat> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::dim(
                "add_row_broadcast",
                format!("bias {}x{} for {} columns", bias.rows, bias.cols, self.cols),
            ));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn sum_rows(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for row in self.iter_rows() {
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn mean_rows(&self) -> Mat {
        let n = self.rows.max(1) as f64;
        self.sum_rows().scale(1.0 / n)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Mat) {
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        matmul(self, other)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::dim(
            "matmul_nt",
            format!("{}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out[(i, j)] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(Error::dim(
            "matmul_tn",
            format!("({}x{})ᵀ · {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &v) in out_row.iter_mut().zip(br) {
                *o += ari * v;
            }
        }
    }
    Ok(out)
}

/// Gradients of `c = a · b` given `dc`: returns `(da, db)`.
pub fn matmul_backward(a: &Mat, b: &Mat, dc: &Mat) -> Result<(Mat, Mat)> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable row-wise softmax (row max subtracted first).
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a single vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Mat, dy: &Mat) -> Result<Mat> {
    y.check_same_shape(dy, "softmax_rows_backward")?;
    let mut dx = Mat::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let inner = dot(yr, dyr);
        for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dv - inner);
        }
    }
    Ok(dx)
}

/// Affine-free layer normalization over each row.
pub fn layer_norm_rows(m: &Mat, eps: f64) -> Mat {
    layer_norm_rows_with_stats(m, eps).0
}

/// Layer normalization that also returns each row's `1 / sqrt(var + eps)`,
/// which [`layer_norm_rows_backward`] needs.
pub fn layer_norm_rows_with_stats(m: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let mut out = m.clone();
    let mut inv_std = Vec::with_capacity(m.rows);
    let n = m.cols as f64;
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

/// Backward of layer normalization from its output and per-row inverse std.
pub fn layer_norm_rows_backward(y: &Mat, inv_std: &[f64], dy: &Mat) -> Result<Mat> {
    y.check_same_shape(dy, "layer_norm_rows_backward")?;
    if inv_std.len() != y.rows {
        return Err(Error::dim("layer_norm_rows_backward", "inv_std length"));
    }
    let n = y.cols as f64;
    let mut dx = Mat::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let mean_dy = dyr.iter().sum::<f64>() / n;
        let mean_dy_y = dot(dyr, yr) / n;
        for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = inv_std[r] * (dv - mean_dy - yv * mean_dy_y);
        }
    }
    Ok(dx)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(m: &Mat) -> Mat {
    m.map(sigmoid_scalar)
}

/// Backward of [`sigmoid`] given its output `y`.
pub fn sigmoid_backward(y: &Mat, dy: &Mat) -> Result<Mat> {
    y.zip_with(dy, "sigmoid_backward", |s, d| d * s * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(m: &Mat) -> Mat {
    m.map(gelu_scalar)
}

/// Backward of [`gelu`] given its input `x`.
pub fn gelu_backward(x: &Mat, dy: &Mat) -> Result<Mat> {
    x.zip_with(dy, "gelu_backward", |v, d| d * gelu_grad_scalar(v))
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize_rows(m: &Mat) -> Result<Mat> {
    l2_normalize_rows_with_norms(m).map(|(y, _)| y)
}

pub fn l2_normalize_rows_with_norms(m: &Mat) -> Result<(Mat, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "row {r} has norm {norm} and cannot be normalized"
            )));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backward of row normalization given the normalized output and the
/// original row norms.
pub fn l2_normalize_rows_backward(y: &Mat, norms: &[f64], dy: &Mat) -> Result<Mat> {
    y.check_same_shape(dy, "l2_normalize_rows_backward")?;
    let mut dx = Mat::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let inner = dot(yr, dyr);
        for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = (dv - yv * inner) / norms[r];
        }
    }
    Ok(dx)
}

/// Central finite-difference gradient of a scalar function of a matrix.
///
/// Each coordinate is perturbed by `±h` in turn; `x` is restored before
/// returning.
pub fn central_diff_gradient<F>(mut f: F, x: &Mat, h: f64) -> Result<Mat>
where
    F: FnMut(&Mat) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Mat::zeros(x.rows, x.cols);
    for idx in 0..x.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + h;
        let plus = f(&probe);
        probe.data[idx] = orig - h;
        let minus = f(&probe);
        probe.data[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle { index: idx });
        }
        grad.data[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error between two gradient tensors, `‖a − b‖ / max(‖a‖, ‖b‖)`,
/// reported as zero when both are (numerically) zero.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff: f64 = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
