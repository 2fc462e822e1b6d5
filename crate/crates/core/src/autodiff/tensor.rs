use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::grid::Grid;

/// Dense `channels x height x width` array. Vectors are `n x 1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape[0] * shape[1] * shape[2] {
            return Err(shape_err(shape, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: [data.len(), 1, 1],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: [1, 1, 1],
            data: vec![v],
        }
    }

    /// Single-channel tensor holding a grid.
    pub fn from_grid(g: &Grid) -> Self {
        Tensor {
            shape: [1, g.rows(), g.cols()],
            data: g.as_slice().to_vec(),
        }
    }

    /// Channel `c` as a grid.
    pub fn channel_grid(&self, c: usize) -> Grid {
        let n = self.shape[1] * self.shape[2];
        Grid::from_vec(self.shape[1], self.shape[2], self.data[c * n..(c + 1) * n].to_vec())
            .expect("channel size matches")
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(shape, self.shape));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(libm::fabs(*v)))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}
