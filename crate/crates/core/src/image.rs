//! Raster containers: RGB images, depth maps, flow fields and scalar maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-channel image with `f64` samples in `[0, peak]`.
///
/// Images decoded from 8-bit files keep `peak = 255`; rendered images use
/// `peak = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub peak: f64,
    /// Row-major interleaved RGB.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, peak: f64) -> Self {
        Image {
            width,
            height,
            peak,
            data: vec![0.0; 3 * width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32, peak: f64, rgb: [f64; 3]) -> Self {
        let mut img = Image::new(width, height, peak);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_fn(width: u32, height: u32, peak: f64, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        let mut img = Image::new(width, height, peak);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * self.index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = 3 * self.index(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel coordinates (pixel `i` is centered
    /// at `i + 0.5`). Coordinates are clamped to the image border.
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let (w, h) = (self.width as f64, self.height as f64);
        let x = (u - 0.5).clamp(0.0, w - 1.0);
        let y = (v - 0.5).clamp(0.0, h - 1.0);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as u32, y0 as u32);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        std::array::from_fn(|k| {
            (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
        })
    }

    /// Luma with weights (0.299, 0.587, 0.114).
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn check_same_size(&self, width: u32, height: u32) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch(format!(
                "image is {}x{}, expected {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Rescale samples to a new peak.
    pub fn with_peak(&self, peak: f64) -> Image {
        let k = peak / self.peak;
        Image {
            width: self.width,
            height: self.height,
            peak,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }
}

/// Metric depth along the camera axis, with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        DepthImage {
            width,
            height,
            depth: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Build from samples; non-positive or non-finite samples are invalid.
    pub fn from_samples(width: u32, height: u32, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} depth samples for {width}x{height}",
                depth.len()
            )));
        }
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Ok(DepthImage {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Option<f64>) -> Self {
        let mut d = DepthImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some(z) = f(x, y) {
                    d.set(x, y, z);
                }
            }
        }
        d
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let i = self.index(x, y);
        self.valid[i].then_some(self.depth[i])
    }

    pub fn set(&mut self, x: u32, y: u32, z: f64) {
        let i = self.index(x, y);
        let ok = z.is_finite() && z > 0.0;
        self.depth[i] = if ok { z } else { 0.0 };
        self.valid[i] = ok;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width as usize * self.height as usize;
        if self.depth.len() != n || self.valid.len() != n {
            return Err(Error::DimensionMismatch("depth buffers do not match size".into()));
        }
        if let Some(i) = (0..n).find(|&i| self.valid[i] && !(self.depth[i] > 0.0 && self.depth[i].is_finite())) {
            return Err(Error::Invalid(format!("valid depth sample {i} is not positive and finite")));
        }
        Ok(())
    }
}

/// Per-pixel displacement in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: u32,
    pub height: u32,
    pub flow: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        FlowField {
            width,
            height,
            flow: vec![[0.0; 2]; n],
            valid: vec![true; n],
        }
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> Option<[f64; 2]> {
        let i = self.index(x, y);
        self.valid[i].then_some(self.flow[i])
    }

    /// Largest displacement magnitude over valid pixels.
    pub fn max_magnitude(&self) -> f64 {
        self.flow
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(f, _)| f[0].hypot(f[1]))
            .fold(0.0, f64::max)
    }
}

/// Separable Gaussian blur of a scalar map with clamped borders.
pub fn gaussian_blur(data: &[f64], width: u32, height: u32, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (w, h) = (width as i64, height as i64);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as i64 - radius;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    acc += kv * src[(sy * w + sx) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}
