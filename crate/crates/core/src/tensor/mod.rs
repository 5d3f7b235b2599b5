//! Dense row-major tensors and a dynamic reverse-mode autodiff graph.
//!
//! Parameters live in [`Tensor`] values (32-bit by default). A [`Graph`] is
//! rebuilt for every forward pass: leaves are copied in, operations are
//! recorded in construction order, and [`Graph::backward`] walks them in
//! reverse. The graph is generic over [`Real`] so that finite-difference
//! checks can re-run the exact same forward in `f64`.

mod graph;
mod ops;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

pub use graph::{Graph, RowMask, Var};

/// Floating-point scalar usable inside a [`Graph`].
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of_f32(x: f32) -> Self;
    fn of_f64(x: f64) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of_f32(x: f32) -> Self {
        x
    }
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of_f32(x: f32) -> Self {
        x as f64
    }
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("token id {index} out of vocabulary of size {vocab}")]
    IndexOutOfVocab { index: usize, vocab: usize },
    #[error("{op} expects a rank-{expected} tensor, got rank {rank}")]
    RankError {
        op: &'static str,
        expected: usize,
        rank: usize,
    },
    #[error("tensor is empty")]
    EmptyTensor,
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// A dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyTensor);
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Row-major 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data).expect("non-empty rows")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "grad length");
        }
        self.grad = grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    /// Same data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        Ok(out)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::RankError {
                op,
                expected: 2,
                rank: self.rank(),
            }),
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> T {
        self.data[row * self.shape[1] + col]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of_f64(x.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&x| U::of_f64(x.as_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Population mean and variance over every element.
pub fn moments<T: Real>(t: &Tensor<T>) -> Result<(f64, f64), TensorError> {
    moments_of(t.data())
}

pub(crate) fn moments_of<T: Real>(data: &[T]) -> Result<(f64, f64), TensorError> {
    if data.is_empty() {
        return Err(TensorError::EmptyTensor);
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok((mean, var))
}

/// Kronecker product of two rank-2 tensors, outside any graph.
pub fn kronecker<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (p, q) = a.dims2("kronecker")?;
    let (r, s) = b.dims2("kronecker")?;
    let mut out = vec![T::zero(); p * r * q * s];
    ops::kron_into(a.data(), b.data(), p, q, r, s, &mut out);
    Tensor::new(vec![p * r, q * s], out)
}

/// Plain matrix product outside any graph.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    ops::matmul_acc(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax outside any graph.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (r, c) = x.dims2("softmax")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        ops::softmax_in_place(row, c);
    }
    Tensor::new(vec![r, c], out)
}
