//! Dense row-major tensors over a generic scalar.
//!
//! Shapes are explicit and checked; elementwise broadcasting is deliberately
//! limited to a leading batch axis (`[m, n] op [n]`) so that shape mistakes
//! fail loudly instead of silently replicating data.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape {shape:?} does not match data length {len}")]
    DataMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Incompatible {
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
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: slice {start}..{} out of range for shape {shape:?}", start + len)]
    Slice {
        op: &'static str,
        start: usize,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
}

/// Dense multi-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, ShapeError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ShapeError::DataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, ShapeError> {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            if r.len() != ncols {
                return Err(ShapeError::Incompatible {
                    op: "from_rows",
                    left: vec![rows.len(), ncols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), ncols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar_shape(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// First (only) element of a scalar tensor.
    pub fn item(&self) -> F {
        debug_assert!(self.is_scalar_shape());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&1)
    }

    pub fn cols(&self) -> usize {
        *self.shape.get(1).unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get2(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: F) {
        let n = self.cols();
        self.data[i * n + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::from_f64_const(self.data.len() as f64)
    }

    /// Elementwise combine; the right operand may also be a vector whose shape
    /// matches the trailing axis of `self` (broadcast over the leading axis).
    pub fn zip(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Self, ShapeError> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if self.rank() == 2 && other.rank() == 1 && other.shape[0] == self.cols() {
            let n = self.cols();
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(idx, &a)| f(a, other.data[idx % n]))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        Err(ShapeError::Incompatible {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, ShapeError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, ShapeError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, ShapeError> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self, ShapeError> {
        if self.rank() != 2 {
            return Err(ShapeError::Rank {
                op: "transpose",
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Matrix product `self @ other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, ShapeError> {
        let (m, k) = mat_dims(self, "matmul")?;
        let (k2, n) = mat_dims(other, "matmul")?;
        if k != k2 {
            return Err(ShapeError::Incompatible {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        Tensor::new(vec![m, n], out)
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<F, ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::Incompatible {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }
}

pub(crate) fn mat_dims<F: Scalar>(
    t: &Tensor<F>,
    op: &'static str,
) -> Result<(usize, usize), ShapeError> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        _ => Err(ShapeError::Rank {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        }),
    }
}

/// `out += a @ b`; `out` must hold `m * n` elements.
pub(crate) fn matmul_into<F: Scalar>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a @ b^T` with `a: [m, k]`, `b: [n, k]`.
pub(crate) fn matmul_nt_into<F: Scalar>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T @ b` with `a: [k, m]`, `b: [k, n]`.
pub(crate) fn matmul_tn_into<F: Scalar>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Squared Euclidean distance between two equal-length slices.
pub fn sq_dist<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Euclidean distance between two equal-length slices.
pub fn euclidean<F: Scalar>(a: &[F], b: &[F]) -> F {
    sq_dist(a, b).sqrt()
}
