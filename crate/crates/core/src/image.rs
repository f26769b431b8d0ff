//! Single-channel projection images.

use crate::error::{Error, Result};

/// A grayscale projection image, row-major, values nominally in `[0, 1]`.
///
/// Rendered images also carry the accumulated opacity map.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub view_angle_deg: f64,
    pub opacity: Option<Vec<f64>>,
}

impl ProjectionImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, view_angle_deg: f64) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            view_angle_deg,
            opacity: None,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
            view_angle_deg: 0.0,
            opacity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Copy with pixels (and opacity, if any) clamped to `[0, 1]`.
    pub fn clamped(&self) -> Self {
        let clamp = |v: &Vec<f64>| v.iter().map(|p| p.clamp(0.0, 1.0)).collect::<Vec<_>>();
        Self {
            width: self.width,
            height: self.height,
            pixels: clamp(&self.pixels),
            view_angle_deg: self.view_angle_deg,
            opacity: self.opacity.as_ref().map(clamp),
        }
    }

    pub(crate) fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}
