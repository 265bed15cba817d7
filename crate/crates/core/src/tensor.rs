//! Dense rank-5 tensors laid out as (batch, channel, depth, height, width),
//! width fastest.

use crate::error::{ensure_finite, Error, Result};

/// Shape of a [`Tensor5`]: `[n, c, d, h, w]`.
pub type Shape5 = [usize; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor5 {
    pub fn zeros(shape: Shape5) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Shape5, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized axis in {shape:?}")));
        }
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extent `[d, h, w]`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let n = self.data.len();
        let g = self.grad.get_or_insert_with(|| vec![0.0; n]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
        let [_, cs, d, h, w] = self.shape;
        (((n * cs + c) * d + z) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, z, y, x)]
    }

    /// Contiguous slice holding channel `c` of batch item `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let len = self.spatial_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.spatial_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn dot(&self, other: &Tensor5) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn ensure_finite(&self, field: &str) -> Result<()> {
        ensure_finite(field, &self.data)
    }
}
