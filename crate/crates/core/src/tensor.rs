//! Dense row-major matrices and the few numeric kernels the head and the
//! simulator share: softmax, scaled dot-product attention, GELU.
//!
//! Matrix products go through `matrixmultiply`, which accepts arbitrary
//! strides, so transposed operands never need to be materialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
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

    /// First `n` rows as a new matrix.
    pub fn head_rows(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::invalid(format!(
                "row of length {} pushed onto {}-column matrix",
                row.len(),
                self.cols
            )));
        }
        self.cols = row.len();
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on raw row-major slices.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // Row-major `a` (m x k): row stride k, col stride 1. Transposed storage
    // holds k x m, so element (i, p) sits at p * m + i.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the stated dimensions
    // and strides, so every index the kernel touches is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::invalid(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(
        a.rows, a.cols, b.cols, 1.0, &a.data, false, &b.data, false, 0.0, &mut out.data,
    );
    Ok(out)
}

/// `a * b^T`, the shape used by `x W^T` projections.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::invalid(format!(
            "matmul_nt {}x{} by ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm(
        a.rows, a.cols, b.rows, 1.0, &a.data, false, &b.data, true, 0.0, &mut out.data,
    );
    Ok(out)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("log_softmax of an empty vector"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(x.iter().map(|v| v - lse).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(Error::invalid(format!(
            "query width {} != key width {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(Error::invalid(format!(
            "{} keys but {} values",
            k.rows, v.rows
        )));
    }
    if k.rows == 0 || q.cols == 0 {
        return Err(Error::invalid("attention over an empty key set"));
    }
    let mut scores = matmul_nt(q, k)?;
    let scale = 1.0 / (q.cols as f64).sqrt();
    for r in 0..scores.rows {
        let row = scores.row_mut(r);
        row.iter_mut().for_each(|s| *s *= scale);
        softmax_in_place(row);
    }
    matmul(&scores, v)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(q.rows(), v.cols());
        let dk = q.cols() as f64;
        for i in 0..q.rows() {
            let mut w = Vec::new();
            for j in 0..k.rows() {
                let mut s = 0.0;
                for c in 0..q.cols() {
                    s += q.get(i, c) * k.get(j, c);
                }
                w.push(s / dk.sqrt());
            }
            let m = w.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = w.iter().map(|x| (x - m).exp()).sum();
            for j in 0..k.rows() {
                let p = (w[j] - m).exp() / z;
                for c in 0..v.cols() {
                    let cur = out.get(i, c);
                    out.set(i, c, cur + p * v.get(j, c));
                }
            }
        }
        out
    }

    fn random_matrix(rng: &mut RngState, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, rng.gaussian(r * c, 1.0)).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, -1000.0, 999.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut rng = RngState::new(1, "test");
        let q = random_matrix(&mut rng, 3, 4);
        let k = random_matrix(&mut rng, 1, 4);
        let v = random_matrix(&mut rng, 1, 5);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut rng = RngState::new(2, "test");
        let q = random_matrix(&mut rng, 2, 3);
        let key = rng.gaussian(3, 1.0);
        let k = Matrix::from_rows(&[key.clone(), key.clone(), key]).unwrap();
        let v = random_matrix(&mut rng, 3, 2);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for c in 0..2 {
            let mean = (v.get(0, c) + v.get(1, c) + v.get(2, c)) / 3.0;
            for r in 0..2 {
                assert!((out.get(r, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_matches_naive_loops() {
        let mut rng = RngState::new(3, "test");
        let q = random_matrix(&mut rng, 2, 2);
        let k = random_matrix(&mut rng, 2, 2);
        let v = random_matrix(&mut rng, 2, 2);
        let fast = scaled_dot_attention(&q, &k, &v).unwrap();
        let slow = naive_attention(&q, &k, &v);
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rejects_shape_mismatch() {
        let q = Matrix::zeros(2, 3);
        let k = Matrix::zeros(2, 4);
        let v = Matrix::zeros(2, 4);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
        let k = Matrix::zeros(2, 3);
        let v = Matrix::zeros(3, 4);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn transposed_gemm_agrees_with_explicit_transpose() {
        let mut rng = RngState::new(4, "test");
        let a = random_matrix(&mut rng, 3, 5);
        let b = random_matrix(&mut rng, 4, 5);
        let direct = matmul_nt(&a, &b).unwrap();
        let explicit = matmul(&a, &b.transpose()).unwrap();
        assert_eq!(direct, explicit);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            x in prop::collection::vec(-1000.0f64..1000.0, 1..24),
            c in -500.0f64..500.0,
        ) {
            let p = softmax(&x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_preserves_unique_argmax(x in prop::collection::vec(-1000.0f64..1000.0, 2..24)) {
            let best = argmax(&x);
            prop_assume!(x.iter().enumerate().all(|(i, v)| i == best || *v < x[best]));
            let p = softmax(&x).unwrap();
            // Far-apart logits underflow to exact ties at 0 only below the winner.
            prop_assert_eq!(argmax(&p), best);
        }

        #[test]
        fn attention_stays_in_value_hull(seed in 0u64..500, n in 1usize..6, m in 1usize..6) {
            let mut rng = RngState::new(seed, "hull");
            let q = random_matrix(&mut rng, n, 4);
            let k = random_matrix(&mut rng, m, 4);
            let v = random_matrix(&mut rng, m, 3);
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            for c in 0..3 {
                let lo = (0..m).map(|r| v.get(r, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..m).map(|r| v.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                for r in 0..n {
                    prop_assert!(out.get(r, c) >= lo - 1e-12 && out.get(r, c) <= hi + 1e-12);
                }
            }
        }
    }
}
