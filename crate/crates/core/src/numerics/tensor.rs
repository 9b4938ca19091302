use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// A scalar is a tensor of shape `[1]`. Tensors are plain values: cloning
/// copies the buffer and nothing is shared between clones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact equality of shape and of every value's bit pattern.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != 2 || p.cols() != cols {
                return Err(Error::dim("concat_rows", first.shape(), p.shape()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }

    /// Gathers the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_matrix("transpose")?;
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Self {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Row-wise log-softmax, stabilized by subtracting each row's maximum.
    pub fn log_softmax(&self) -> Result<Self> {
        self.require_matrix("log_softmax")?;
        if self.cols() < 2 {
            return Err(Error::Contract(format!(
                "log_softmax needs at least 2 classes, got shape {:?}",
                self.shape
            )));
        }
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Column-wise mean of a `b × d` batch.
    pub fn batch_mean(&self) -> Result<Self> {
        self.require_matrix("batch_mean")?;
        let (b, d) = (self.rows(), self.cols());
        if b == 0 {
            return Err(Error::EmptyBatch { op: "batch_mean" });
        }
        let mut mean = vec![0.0; d];
        for row in self.data.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv = 1.0 / b as f64;
        for m in &mut mean {
            *m *= inv;
        }
        Ok(Self::vector(mean))
    }

    /// Unbiased sample covariance (divisor `b − 1`) of a `b × d` batch.
    pub fn batch_covariance(&self) -> Result<Self> {
        self.require_matrix("batch_covariance")?;
        let (b, d) = (self.rows(), self.cols());
        if b < 2 {
            return Err(Error::InsufficientSamples {
                op: "batch_covariance",
                need: 2,
                got: b,
            });
        }
        let mean = self.batch_mean()?;
        let mut cov = vec![0.0; d * d];
        let mut centered = vec![0.0; d];
        for row in self.data.chunks(d) {
            for ((c, &v), &m) in centered.iter_mut().zip(row).zip(&mean.data) {
                *c = v - m;
            }
            for i in 0..d {
                let ci = centered[i];
                // Upper triangle only; mirrored below so the result is exactly symmetric.
                for j in i..d {
                    cov[i * d + j] += ci * centered[j];
                }
            }
        }
        let inv = 1.0 / (b - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] * inv;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self {
            shape: vec![d, d],
            data: cov,
        })
    }

    /// Sum of squared elementwise differences.
    pub fn sq_frobenius_dist(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("sq_frobenius_dist", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub(crate) fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);

        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let col = m(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&col).unwrap(), m(&[&[2.0], &[4.0]]));

        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(z.matmul(&b).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::vector(vec![-3.0, -0.5]);
        assert_eq!(neg.relu().data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_softmax_uniform_and_shift() {
        let z = Tensor::zeros(&[1, 5]);
        for &v in z.log_softmax().unwrap().data() {
            assert!((v + 5f64.ln()).abs() < 1e-15);
        }
        let c = m(&[&[7.5, 7.5, 7.5, 7.5]]);
        for &v in c.log_softmax().unwrap().data() {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_large_logit() {
        let x = m(&[&[1000.0, 0.0]]);
        let out = x.log_softmax().unwrap();
        assert!(out.is_finite());
        // log(1 + e^-1000) underflows to 0 in f64
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[1], -1000.0);
    }

    #[test]
    fn log_softmax_rejects_single_class() {
        assert!(Tensor::zeros(&[2, 1]).log_softmax().is_err());
    }

    #[test]
    fn batch_mean_examples() {
        let z = m(&[&[0.0, 0.0], &[2.0, 2.0]]);
        assert_eq!(z.batch_mean().unwrap().data(), &[1.0, 1.0]);
        let one = m(&[&[3.0, -1.0, 4.0]]);
        assert_eq!(one.batch_mean().unwrap().data(), one.data());
    }

    #[test]
    fn batch_covariance_examples() {
        let z = m(&[&[0.0, 0.0], &[2.0, 2.0]]);
        assert_eq!(z.batch_covariance().unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
        let same = m(&[&[1.5, 2.0], &[1.5, 2.0], &[1.5, 2.0]]);
        assert_eq!(same.batch_covariance().unwrap(), Tensor::zeros(&[2, 2]));
        let err = m(&[&[1.0, 2.0]]).batch_covariance().unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { got: 1, .. }));
    }

    #[test]
    fn sq_frobenius_examples() {
        let a = Tensor::filled(&[2, 2], 1.0);
        assert_eq!(a.sq_frobenius_dist(&a).unwrap(), 0.0);
        assert_eq!(a.sq_frobenius_dist(&Tensor::zeros(&[2, 2])).unwrap(), 4.0);
        assert!(a.sq_frobenius_dist(&Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn new_validates_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
