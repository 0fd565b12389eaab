use serde::{Deserialize, Serialize};

use super::{DiffError, Scalar};

/// Dense row-major array of rank 0, 1 or 2.
///
/// Rank-0 tensors (shape `[]`) hold a single scalar; rank-2 tensors are
/// `[rows, cols]` with the leading dimension used as the batch axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(values: Vec<T>, shape: &[usize]) -> Result<Self, DiffError> {
        if shape.len() > 2 {
            return Err(DiffError::Rank { shape: shape.to_vec() });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(DiffError::Length { shape: shape.to_vec(), len: values.len() });
        }
        Ok(Self { shape: shape.to_vec(), values })
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: Vec::new(), values: vec![v] }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, DiffError> {
        Self::new(values, &[rows, cols])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![v; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = T::one();
        }
        t
    }

    /// Stacks equally long rows into a `[rows.len(), width]` matrix.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, DiffError> {
        let width = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(DiffError::Shape {
                    op: "from_rows",
                    lhs: vec![width],
                    rhs: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(values, &[rows.len(), width])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of batch rows; rank-0 and rank-1 tensors count as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Width of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, DiffError> {
        let expected: usize = shape.iter().product();
        if shape.len() > 2 || expected != self.values.len() {
            return Err(DiffError::Length { shape: shape.to_vec(), len: self.values.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Selects rows `idx` of a rank-2 tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self { shape: vec![idx.len(), c], values }
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Self {
        let c = self.cols();
        let mut values = Vec::with_capacity(self.rows() * times * c);
        for i in 0..self.rows() {
            for _ in 0..times {
                values.extend_from_slice(self.row(i));
            }
        }
        Self { shape: vec![self.rows() * times, c], values }
    }

    /// Vertical concatenation of rank-2 tensors with equal widths.
    pub fn vstack(parts: &[&Self]) -> Result<Self, DiffError> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(DiffError::Shape {
                    op: "vstack",
                    lhs: vec![c],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            values.extend_from_slice(&p.values);
        }
        Self::new(values, &[rows, c])
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}
