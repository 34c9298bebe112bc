use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// An `H × W × C` float grid, row-major and channel-last.
///
/// The same type carries images in `[0, 1]`, masks, depth maps in metres and
/// latents; what the values mean is up to the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty raster");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Single-channel raster from a per-pixel function of `(x, y)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut r = Self::zeros(height, width, 1);
        for y in 0..height {
            for x in 0..width {
                r.data[y * width + x] = f(x, y);
            }
        }
        r
    }

    /// Binary mask with ones inside the axis-aligned box `[x0, x1) × [y0, y1)`.
    pub fn rect_mask(height: usize, width: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self::from_fn(height, width, |x, y| {
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn ensure_dims(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.dims() != (height, width) {
            return Err(Error::shape(format!(
                "{what} is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Fails unless every value is in `[0, 1]`.
    pub fn ensure_unit_range(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("{what} has values outside [0, 1]")));
        }
        Ok(())
    }

    /// Fails unless every value is finite and strictly positive.
    pub fn ensure_positive(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("{what} must be strictly positive")));
        }
        Ok(())
    }

    /// Per-pixel `value > 0.5` of channel 0.
    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.pixel_count())
            .map(|i| self.data[i * self.channels] > 0.5)
            .collect()
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), height * width);
        Self {
            height,
            width,
            channels: 1,
            data: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Number of mask pixels above one half.
    pub fn count_on(&self) -> usize {
        self.to_bools().into_iter().filter(|&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.count_on() == 0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise multiplication by a single-channel mask.
    pub fn masked(&self, mask: &Raster) -> Result<Raster> {
        mask.ensure_dims(self.height, self.width, "mask")?;
        let mut out = self.clone();
        for i in 0..self.pixel_count() {
            let m = mask.data[i * mask.channels];
            for v in out.pixel_mut(i) {
                *v *= m;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean of the mask-weighted pixel coordinates `(x, y)`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let w = self.get(x, y, 0);
                sx += w * x as f64;
                sy += w * y as f64;
                sw += w;
            }
        }
        (sw > 0.0).then(|| (sx / sw, sy / sw))
    }

    /// The raster as a `(H·W) × C` matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.pixel_count(), self.channels, self.data.clone())
            .expect("raster data length is checked on construction")
    }

    pub fn from_matrix(height: usize, width: usize, m: &Matrix) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::shape(format!(
                "{} rows cannot form a {height}x{width} grid",
                m.rows()
            )));
        }
        Self::new(height, width, m.cols(), m.data().to_vec())
    }

    /// Keeps only the listed channels, in order.
    pub fn select_channels(&self, channels: &[usize]) -> Raster {
        let mut data = Vec::with_capacity(self.pixel_count() * channels.len());
        for i in 0..self.pixel_count() {
            let p = self.pixel(i);
            data.extend(channels.iter().map(|&c| p[c]));
        }
        Raster {
            height: self.height,
            width: self.width,
            channels: channels.len(),
            data,
        }
    }
}
