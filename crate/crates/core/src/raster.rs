//! Dense 2-D rasters: float heatmaps and binary masks.
//!
//! Row-major storage; serialized as `{"height":h,"width":w,"data":[...]}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RasterError {
    #[error("raster shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("data length {0} does not match {1}x{2}")]
    BadDataLength(usize, usize, usize),
}

/// Float-valued raster (heatmap).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if data.len() != height * width {
            return Err(RasterError::BadDataLength(data.len(), height, width));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other_h: usize, other_w: usize) -> Result<(), RasterError> {
        if self.height != other_h || self.width != other_w {
            return Err(RasterError::ShapeMismatch(
                self.height,
                self.width,
                other_h,
                other_w,
            ));
        }
        Ok(())
    }
}

/// Binary raster (unit footprint or ground-truth region).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryRaster {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != height * width {
            return Err(RasterError::BadDataLength(data.len(), height, width));
        }
        debug_assert!(data.iter().all(|&b| b <= 1));
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        debug_assert!(value <= 1);
        self.data[row * self.width + col] = value;
    }

    /// Number of positive pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b == 1).count()
    }

    /// Circular 2-D shift by (row, col) offsets.
    pub fn rolled(&self, dr: usize, dc: usize) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let nr = (r + dr) % self.height;
                let nc = (c + dc) % self.width;
                out.set(nr, nc, self.get(r, c));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_preserves_area() {
        let g = BinaryRaster::new(3, 3, vec![1, 1, 0, 0, 0, 0, 0, 0, 1]).unwrap();
        let rolled = g.rolled(1, 2);
        assert_eq!(rolled.area(), g.area());
        // Identity shift.
        assert_eq!(g.rolled(0, 0), g);
        // Full-period shift.
        assert_eq!(g.rolled(3, 3), g);
    }

    #[test]
    fn shape_validation() {
        assert!(Raster::new(2, 2, vec![0.0; 3]).is_err());
        let r = Raster::zeros(2, 3);
        assert!(r.same_shape(2, 3).is_ok());
        assert!(r.same_shape(3, 2).is_err());
    }
}
