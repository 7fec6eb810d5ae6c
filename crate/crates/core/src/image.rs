//! Image and disparity-map containers.

use crate::error::{bail, Result};

/// Which view of the rectified pair a map or volume belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Left,
    Right,
}

impl View {
    pub fn opposite(self) -> View {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Builds an image, clamping intensities into `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            bail!(Dimension, "{}x{} image with {} values", height, width, data.len());
        }
        if data.iter().any(|v| v.is_nan()) {
            bail!(Numeric, "NaN intensity");
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Edge-replicated access.
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x)
    }
}

/// Per-pixel real disparities with a validity mask. Invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if values.len() != n || valid.len() != n {
            bail!(
                Dimension,
                "{}x{} disparity map with {} values and {} mask entries",
                height,
                width,
                values.len(),
                valid.len()
            );
        }
        if let Some(v) = values.iter().zip(&valid).find(|(v, &m)| m && !v.is_finite()) {
            bail!(Numeric, "non-finite valid disparity {}", v.0);
        }
        let values = values
            .into_iter()
            .zip(&valid)
            .map(|(v, &m)| if m { v } else { 0.0 })
            .collect();
        Ok(DisparityMap {
            height,
            width,
            values,
            valid,
        })
    }

    /// Fully valid map.
    pub fn dense(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(height, width, values, vec![true; height * width])
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        DisparityMap {
            height,
            width,
            values: vec![value; height * width],
            valid: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_dims(&self, other: &DisparityMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            bail!(
                Dimension,
                "maps of size {}x{} and {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            );
        }
        Ok(())
    }
}
