//! RGB images and depth maps.

use crate::error::{Error, Result};

/// Interleaved `H×W×3` image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim("image", &[height, width, 3], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Multiplies every channel by `factor` and clamps to `[0, 1]`.
    pub fn brightness(&self, factor: f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| (v * factor).clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Positive depths in scene units with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// All pixels valid.
    pub fn new(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::dim("depth_map", &[height, width], &[depth.len()]));
        }
        let valid = vec![true; depth.len()];
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    pub fn with_mask(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != height * width || valid.len() != depth.len() {
            return Err(Error::dim("depth_map", &[height, width], &[depth.len(), valid.len()]));
        }
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn same_size(&self, other: &DepthMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}
