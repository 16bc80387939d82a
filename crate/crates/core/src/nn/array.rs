use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of doubles.
///
/// Most kernels treat an array as a matrix: the last dimension is the row
/// width and everything before it is flattened into rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let size: usize = shape.iter().product();
        if size != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {size} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn same_shape(&self, other: &Array) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// `self · other`, both matrices.
    pub fn matmul(&self, other: &Array) -> Array {
        let (n, k) = (self.rows(), self.cols());
        let m = other.cols();
        assert_eq!(k, other.rows(), "matmul inner dimension");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        Array::matrix(n, m, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Array) -> Array {
        let n = self.rows();
        let m = other.rows();
        assert_eq!(self.cols(), other.cols(), "matmul_nt inner dimension");
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        Array::matrix(n, m, out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Array) -> Array {
        let k = self.rows();
        assert_eq!(k, other.rows(), "matmul_tn inner dimension");
        let (n, m) = (self.cols(), other.cols());
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a = self.row(p);
            let b = other.row(p);
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, bv) in orow.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        }
        Array::matrix(n, m, out)
    }

    pub fn transpose(&self) -> Array {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Array::matrix(m, n, out)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(Error::invalid("row", "softmax of an empty row"));
    }
    Ok(softmax_unchecked(row))
}

pub(crate) fn softmax_unchecked(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Row-wise softmax over a matrix.
pub fn softmax_rows(x: &Array) -> Array {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let s = softmax_unchecked(x.row(i));
        out.row_mut(i).copy_from_slice(&s);
    }
    out
}

/// Per-row normalization statistics kept for the backward pass.
pub(crate) struct NormStats {
    pub xhat: Array,
    pub inv_std: Vec<f64>,
}

pub(crate) fn normalize_rows(x: &Array, eps: f64) -> NormStats {
    let d = x.cols();
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        // A constant row with eps = 0 normalizes to zeros rather than NaN.
        let inv = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    NormStats { xhat, inv_std }
}

/// Layer normalization over the last dimension with affine gain and bias.
pub fn layer_norm(x: &Array, gain: &[f64], bias: &[f64], eps: f64) -> Result<Array> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::invalid("x", "layer_norm needs a feature dimension of at least 2"));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias length {}/{} for width {d}",
            gain.len(),
            bias.len()
        )));
    }
    let mut y = normalize_rows(x, eps).xhat;
    for i in 0..y.rows() {
        for ((v, g), b) in y.row_mut(i).iter_mut().zip(gain).zip(bias) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &s {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let s = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(s[0], 0.0900, epsilon = 1e-4);
        assert_abs_diff_eq!(s[1], 0.2447, epsilon = 1e-4);
        assert_abs_diff_eq!(s[2], 0.6652, epsilon = 1e-4);
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_shift_invariant_and_stable() {
        let a = softmax(&[0.3, -1.2, 4.0]).unwrap();
        let b = softmax(&[1000.3, 998.8, 1004.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let x = Array::row_vector(vec![4.0; 5]);
        let y = layer_norm(&x, &[1.0; 5], &[0.0; 5], 1e-12).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));

        let x = Array::row_vector(vec![1.0, 3.0]);
        let y = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        // Uniform gain: the output mean is the bias.
        let x = Array::row_vector(vec![0.5, -2.0, 7.0, 1.25]);
        let z = layer_norm(&x, &[2.5; 4], &[0.7; 4], 1e-12).unwrap();
        assert_abs_diff_eq!(z.data().iter().sum::<f64>() / 4.0, 0.7, epsilon = 1e-9);

        assert!(layer_norm(&Array::row_vector(vec![1.0]), &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn layer_norm_pre_affine_moments() {
        let x = Array::row_vector(vec![0.1, 5.0, -3.0, 2.2, 8.8, -0.4]);
        let y = layer_norm(&x, &[1.0; 6], &[0.0; 6], 1e-9).unwrap();
        let mean = y.data().iter().sum::<f64>() / 6.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Array::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Array::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let ab = a.matmul(&b);
        assert_eq!(ab.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.matmul_nt(&b.transpose()), ab);
        assert_eq!(a.transpose().matmul_tn(&b), ab);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }
}
