use ndarray::Array2;

use crate::error::{Error, Result};

/// Spatial latent stored as a `(height·width, channels)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl LatentTensor {
    pub fn new(height: usize, width: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape {
                expected: vec![height * width, data.ncols()],
                got: data.shape().to_vec(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, data: Array2::zeros((height * width, channels)) }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array2::from_shape_vec((height * width, channels), values).map_err(|_| Error::Shape {
            expected: vec![height, width, channels],
            got: vec![],
        })?;
        Self::new(height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels()]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { expected: self.shape().to_vec(), got: other.shape().to_vec() });
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { height: self.height, width: self.width, data: &self.data * a }
    }
}
