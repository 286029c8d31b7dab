// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Every reduction runs in a fixed index order so that results do not
//! depend on how work items are scheduled.

use serde::{Deserialize, Serialize};

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `out = self * x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// Product restricted to rows `r0..r1`.
    pub fn matvec_rows_into(&self, r0: usize, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r0 + i), x);
        }
    }

    /// `out += self^T * g`.
    pub fn matvec_t_acc(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &gr) in g.iter().enumerate() {
            if gr != 0.0 {
                axpy(gr, self.row(r), out);
            }
        }
    }

    /// `self += g x^T` (rank-one update used for weight gradients).
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &gr) in g.iter().enumerate() {
            if gr != 0.0 {
                let cols = self.cols;
                axpy(gr, x, &mut self.data[r * cols..(r + 1) * cols]);
            }
        }
    }

    /// Column `c` as a fresh vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with four independent accumulators combined in fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log(softmax(v)[idx])`.
pub fn log_softmax_at(v: &[f64], idx: usize) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    v[idx] - lse
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Exact derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// RMS normalisation: returns `1/rms` and writes `gain * x / rms` into `out`.
#[inline]
pub fn rms_norm_into(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, xi), g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * inv * g;
    }
    inv
}

/// Backward of [`rms_norm_into`] with respect to `x`, accumulated into `dx`.
/// Also accumulates the gain gradient into `dgain` when provided.
pub fn rms_norm_backward(
    x: &[f64],
    gain: &[f64],
    inv: f64,
    dy: &[f64],
    dx: &mut [f64],
    dgain: Option<&mut [f64]>,
) {
    let n = x.len() as f64;
    // y_i = g_i x_i inv ; d inv / d x_j = -inv^3 x_j / n
    let mut s = 0.0;
    for ((xi, gi), dyi) in x.iter().zip(gain).zip(dy) {
        s += dyi * gi * xi;
    }
    let coeff = s * inv * inv * inv / n;
    for (((dxi, xi), gi), dyi) in dx.iter_mut().zip(x).zip(gain).zip(dy) {
        *dxi += dyi * gi * inv - coeff * xi;
    }
    if let Some(dg) = dgain {
        for ((dgi, xi), dyi) in dg.iter_mut().zip(x).zip(dy) {
            *dgi += dyi * xi * inv;
        }
    }
}

/// Round every entry through `f32`, so the values survive the weight file
/// format unchanged.
pub fn round_to_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}
