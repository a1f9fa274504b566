//! 2D intensity grid, row-major.

use crate::error::{GhostError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(GhostError::ShapeMismatch {
                op: "Image::new",
                axis: "pixels",
                expected: height * width,
                got: pixels.len(),
            });
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .pixels
            .iter()
            .map(|&p| (p - mean) * (p - mean))
            .sum::<f64>()
            / self.len() as f64;
        var.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|p| p.is_finite())
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pad with a zero border of `border` pixels on every side.
    pub fn zero_padded(&self, border: usize) -> Image {
        let h = self.height + 2 * border;
        let w = self.width + 2 * border;
        let mut out = Image::zeros(h, w);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r + border, c + border, self.get(r, c));
            }
        }
        out
    }

    /// Crop the central `height x width` region starting at (top, left).
    pub fn cropped(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut out = Image::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                out.set(r, c, self.get(top + r, left + c));
            }
        }
        out
    }
}
