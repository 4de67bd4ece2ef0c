//! Dense tensors and the scalar kernels shared by every other module:
//! matrix products, softmax, cosine similarity, a central-difference
//! gradient oracle and a semidefinite Cholesky factorization.
//!
//! All reductions run in a fixed order so that results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Norms at or below this value are treated as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::domain("tensor", "shape dimensions must be positive"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    /// One-dimensional tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Matrix product with a fixed left-to-right summation over the inner
    /// dimension.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += self.data[i * k + t] * other.data[t * n + j];
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Free-function form of [`Tensor::matmul`].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Sum whose result does not depend on the order of `values`: terms are
/// added after sorting by IEEE total order.
pub fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Numerically stable `log(softmax(v))`.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::domain("softmax", "empty input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss {
            context: "softmax of non-finite logits".into(),
        });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| libm::exp(x - max)).sum();
    let log_z = max + libm::log(sum);
    Ok(v.iter().map(|x| x - log_z).collect())
}

/// Softmax with max subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::domain("softmax", "empty input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss {
            context: "softmax of non-finite logits".into(),
        });
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| libm::exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Cosine of the angle between two vectors.
///
/// Symmetric in its arguments bit for bit, and clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na * nb).is_finite() {
        // squared norms overflowed; the angle survives rescaling
        if a.iter().chain(b).any(|x| !x.is_finite()) {
            return Err(Error::domain("cosine_similarity", "non-finite input"));
        }
        let rescale = |v: &[f64]| -> Vec<f64> {
            let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            v.iter().map(|x| x / m).collect()
        };
        return cosine_similarity(&rescale(a), &rescale(b));
    }
    for n in [na, nb] {
        if !(n > DEGENERATE_NORM) {
            return Err(Error::DegenerateVector {
                op: "cosine_similarity",
                norm: n,
            });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::domain("finite_diff_grad", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for k in 0..x.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let plus = f(&probe);
        probe.data[k] = orig - h;
        let minus = f(&probe);
        probe.data[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle { index: k });
        }
        grad.data[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Lower-triangular factor `L` with `L Lᵀ = cov` for a symmetric positive
/// semidefinite matrix. Zero pivots are allowed and produce zero columns.
pub fn psd_cholesky(cov: &Tensor) -> Result<Tensor> {
    let (n, m) = cov.dims2("psd_cholesky")?;
    if n != m {
        return Err(Error::shape("psd_cholesky", cov.shape(), &[n, n]));
    }
    let scale = cov.data.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    let tol = 1e-10 * scale;
    for i in 0..n {
        for j in 0..i {
            if (cov.at(i, j) - cov.at(j, i)).abs() > tol {
                return Err(Error::domain("psd_cholesky", "matrix is not symmetric"));
            }
        }
    }
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = cov.at(j, j);
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if d < -tol {
            return Err(Error::domain("psd_cholesky", "matrix is not positive semidefinite"));
        }
        if d <= tol {
            for i in j + 1..n {
                let mut s = cov.at(i, j);
                for k in 0..j {
                    s -= l.at(i, k) * l.at(j, k);
                }
                if s.abs() > libm::sqrt(tol) {
                    return Err(Error::domain(
                        "psd_cholesky",
                        "matrix is not positive semidefinite",
                    ));
                }
            }
            continue;
        }
        let root = libm::sqrt(d);
        l.set(j, j, root);
        for i in j + 1..n {
            let mut s = cov.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / root);
        }
    }
    Ok(l)
}
